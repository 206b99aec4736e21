use crate::error::{invalid, Result};
use crate::linalg::Matrix;

use super::{AttentionKind, ModelConfig, PosEncoding};

/// Rotates consecutive pairs `(v[2j], v[2j+1])` by `position · θ^(-2j/d_h)`.
pub fn apply_rope(v: &mut [f64], position: usize, theta: f64) -> Result<()> {
    rope_rotate(v, position, theta, 1.0)
}

/// Inverse rotation (transpose of [`apply_rope`]).
pub fn apply_rope_inverse(v: &mut [f64], position: usize, theta: f64) -> Result<()> {
    rope_rotate(v, position, theta, -1.0)
}

fn rope_rotate(v: &mut [f64], position: usize, theta: f64, sign: f64) -> Result<()> {
    let dh = v.len();
    if dh % 2 != 0 {
        return Err(invalid(format!("RoPE needs an even head width, got {dh}")));
    }
    if position == 0 {
        return Ok(());
    }
    for j in 0..dh / 2 {
        let freq = theta.powf(-2.0 * j as f64 / dh as f64);
        let (s, c) = (sign * position as f64 * freq).sin_cos();
        let (a, b) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = a * c - b * s;
        v[2 * j + 1] = a * s + b * c;
    }
    Ok(())
}

/// Geometric ALiBi slope `2^(-8(i+1)/h)` for query head `i`.
pub fn alibi_slope(head: usize, n_heads: usize) -> f64 {
    (2.0f64).powf(-8.0 * (head + 1) as f64 / n_heads as f64)
}

/// Per-head additive bias `-slope_i · (query_pos - key_pos)`.
pub fn alibi_bias(n_heads: usize, query_pos: usize, key_pos: usize) -> Vec<f64> {
    debug_assert!(key_pos <= query_pos);
    let dist = query_pos.saturating_sub(key_pos) as f64;
    (0..n_heads).map(|i| -alibi_slope(i, n_heads) * dist).collect()
}

/// Scaled dot-product scores of one query head against every cached key row,
/// including the ALiBi bias when configured.
///
/// `keys` is the layer's key cache, row-major with width `config.kv_width()`.
/// - standard: `q_head` (width `d_h`) is dotted with the slice of the KV head
///   serving `head`.
/// - projected-key: `q_head` is first mapped to `q_head · Pᵢᵀ` (width
///   `g·d_h`, `Pᵢ` = the `d_h` columns of `key_proj` belonging to `head`)
///   and dotted with whole compressed rows, which equals
///   `q · Pᵢᵀ P K_origᵀ / √d_h`.
pub fn attention_scores<E: Copy + Into<f64>>(
    q_head: &[f64],
    head: usize,
    keys: &[E],
    key_proj: Option<&Matrix>,
    config: &ModelConfig,
    query_pos: usize,
) -> Result<Vec<f64>> {
    let dh = config.head_dim;
    let width = config.kv_width();
    if q_head.len() != dh {
        return Err(invalid(format!("query head width {} != head_dim {dh}", q_head.len())));
    }
    if keys.len() % width != 0 {
        return Err(invalid(format!("key cache length {} is not a multiple of width {width}", keys.len())));
    }
    if head >= config.n_heads {
        return Err(invalid(format!("head {head} out of range")));
    }
    let n = keys.len() / width;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = Vec::with_capacity(n);
    match config.attention_kind {
        AttentionKind::Standard => {
            if key_proj.is_some() {
                return Err(invalid("key_proj given for standard attention"));
            }
            let off = (head / config.group_size()) * dh;
            for r in 0..n {
                let k = &keys[r * width + off..r * width + off + dh];
                let s: f64 = q_head.iter().zip(k).map(|(&a, &b)| a * b.into()).sum();
                scores.push(s * scale);
            }
        }
        AttentionKind::ProjectedKey => {
            let p = key_proj.ok_or_else(|| invalid("projected_key attention needs key_proj"))?;
            if p.shape() != (width, config.n_heads * dh) {
                return Err(invalid(format!("key_proj shape {:?} inconsistent with config", p.shape())));
            }
            let mapped = map_query(q_head, head, p);
            for r in 0..n {
                let k = &keys[r * width..(r + 1) * width];
                let s: f64 = mapped.iter().zip(k).map(|(&a, &b)| a * b.into()).sum();
                scores.push(s * scale);
            }
        }
    }
    if config.pos_encoding == PosEncoding::Alibi {
        if n > query_pos + 1 {
            return Err(invalid("more cached keys than positions up to the query"));
        }
        let slope = alibi_slope(head, config.n_heads);
        for (r, s) in scores.iter_mut().enumerate() {
            *s -= slope * (query_pos - r) as f64;
        }
    }
    Ok(scores)
}

/// `q_head · Pᵢᵀ`, where `Pᵢ` = columns `head·d_h .. (head+1)·d_h` of `p`.
pub(crate) fn map_query(q_head: &[f64], head: usize, p: &Matrix) -> Vec<f64> {
    let dh = q_head.len();
    let off = head * dh;
    (0..p.rows())
        .map(|c| {
            let row = &p.row(c)[off..off + dh];
            row.iter().zip(q_head).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Numerically stable softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    v.iter_mut().for_each(|x| *x /= z);
}
