use crate::error::{invalid, Result};
use crate::linalg::{dot, Matrix};

use super::attention::{apply_rope, attention_scores, softmax_in_place};
use super::ops::{gelu, rms_norm};
use super::{AttentionKind, Checkpoint, KVCache, PosEncoding};

/// Per-layer activations handed to a probe during a forward pass, all
/// `tokens x width` in `f64`.
pub struct LayerProbe<'a> {
    pub layer: usize,
    /// First absolute position of these rows.
    pub start: usize,
    /// `x W_K` before any rotation.
    pub keys_pre_rope: &'a Matrix,
    /// Keys after RoPE (identical to `keys_pre_rope` without RoPE), before
    /// any cache projection.
    pub keys_post_rope: &'a Matrix,
    pub values: &'a Matrix,
}

/// Full-sequence forward from an empty cache.
pub fn forward(ckpt: &Checkpoint, tokens: &[u32]) -> Result<(Matrix, KVCache)> {
    forward_with_probe(ckpt, tokens, &mut |_| {})
}

pub fn forward_with_probe(
    ckpt: &Checkpoint,
    tokens: &[u32],
    probe: &mut dyn FnMut(&LayerProbe<'_>),
) -> Result<(Matrix, KVCache)> {
    let c = &ckpt.config;
    if tokens.is_empty() || tokens.len() > c.max_seq_len {
        return Err(invalid(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            c.max_seq_len
        )));
    }
    let mut cache = KVCache::new(c);
    let logits = extend_with_probe(ckpt, &mut cache, tokens, probe)?;
    Ok((logits, cache))
}

/// One incremental step: appends a single row per layer and returns the
/// `1 x vocab` logits for `token`.
pub fn decode_step(ckpt: &Checkpoint, cache: &mut KVCache, token: u32) -> Result<Matrix> {
    extend(ckpt, cache, &[token])
}

/// Processes `tokens` after whatever the cache already holds.
pub fn extend(ckpt: &Checkpoint, cache: &mut KVCache, tokens: &[u32]) -> Result<Matrix> {
    extend_with_probe(ckpt, cache, tokens, &mut |_| {})
}

pub fn extend_with_probe(
    ckpt: &Checkpoint,
    cache: &mut KVCache,
    tokens: &[u32],
    probe: &mut dyn FnMut(&LayerProbe<'_>),
) -> Result<Matrix> {
    let c = &ckpt.config;
    if cache.n_layers() != c.n_layers || cache.width() != c.kv_width() {
        return Err(invalid("KV cache layout does not match the checkpoint"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(invalid(format!("token id {bad} >= vocab size {}", c.vocab_size)));
    }
    cache.check_room(tokens.len())?;
    let start = cache.len();
    let n = tokens.len();
    let d = c.d_model;
    let dh = c.head_dim;
    let width = c.kv_width();

    let mut x = Matrix::zeros(n, d);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(ckpt.embedding.row(tok as usize));
    }

    for (li, layer) in ckpt.layers.iter().enumerate() {
        let (a, _) = rms_norm(&x, &layer.attn_norm);
        let mut q = a.matmul(&layer.wq)?;
        let k_pre = a.matmul(&layer.wk)?;
        let v = a.matmul(&layer.wv)?;
        let mut k = k_pre.clone();
        if c.pos_encoding == PosEncoding::Rope {
            for t in 0..n {
                let pos = start + t;
                for h in q.row_mut(t).chunks_mut(dh) {
                    apply_rope(h, pos, c.rope_theta)?;
                }
                for h in k.row_mut(t).chunks_mut(dh) {
                    apply_rope(h, pos, c.rope_theta)?;
                }
            }
        }
        probe(&LayerProbe { layer: li, start, keys_pre_rope: &k_pre, keys_post_rope: &k, values: &v });
        let cached_keys = match c.attention_kind {
            AttentionKind::Standard => k,
            AttentionKind::ProjectedKey => {
                let p = layer.key_proj.as_ref().ok_or_else(|| invalid("missing key_proj"))?;
                k.matmul_t(p)?
            }
        };
        cache.push_layer(li, cached_keys.data(), v.data());

        let keys = cache.keys(li);
        let values = cache.values(li);
        let mut o = Matrix::zeros(n, d);
        for t in 0..n {
            let pos = start + t;
            let visible = &keys[..(pos + 1) * width];
            for head in 0..c.n_heads {
                let qh = &q.row(t)[head * dh..(head + 1) * dh];
                let mut w = attention_scores(qh, head, visible, layer.key_proj.as_ref(), c, pos)?;
                softmax_in_place(&mut w);
                let voff = (head / c.group_size()) * dh;
                let out = &mut o.row_mut(t)[head * dh..(head + 1) * dh];
                for (r, &wr) in w.iter().enumerate() {
                    let vr = &values[r * width + voff..r * width + voff + dh];
                    for (oo, &vv) in out.iter_mut().zip(vr) {
                        *oo += wr * vv as f64;
                    }
                }
            }
        }
        x.add_assign(&o.matmul(&layer.wo)?);

        let (b, _) = rms_norm(&x, &layer.mlp_norm);
        let mut u = b.matmul(&layer.w1)?;
        u.data_mut().iter_mut().for_each(|z| *z = gelu(*z));
        x.add_assign(&u.matmul(&layer.w2)?);
    }
    cache.commit(n);

    let (f, _) = rms_norm(&x, &ckpt.final_norm);
    let mut logits = Matrix::zeros(n, c.vocab_size);
    for t in 0..n {
        let fr = f.row(t);
        for (vtok, l) in logits.row_mut(t).iter_mut().enumerate() {
            *l = dot(fr, ckpt.embedding.row(vtok));
        }
    }
    Ok(logits)
}

/// Greedy continuation of `prompt` by `n_new` tokens.
pub fn greedy_generate(ckpt: &Checkpoint, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
    let (logits, mut cache) = forward(ckpt, prompt)?;
    let mut out = Vec::with_capacity(n_new);
    let mut last = argmax(logits.row(logits.rows() - 1));
    for i in 0..n_new {
        out.push(last);
        if i + 1 == n_new {
            break;
        }
        let l = decode_step(ckpt, &mut cache, last)?;
        last = argmax(l.row(0));
    }
    Ok(out)
}

pub(crate) fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}
