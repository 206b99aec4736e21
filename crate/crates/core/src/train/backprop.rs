//! Forward pass with an activation tape and the matching reverse pass for the
//! fixed block architecture. Everything runs in `f64` against the checkpoint
//! weights directly (no cache rounding), so it doubles as a reference forward.

use crate::corpus::PAD;
use crate::error::{invalid, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::model::ops::{gelu, gelu_grad, rms_norm};
use crate::model::{alibi_slope, apply_rope, apply_rope_inverse, AttentionKind, Checkpoint, PosEncoding};

struct LayerTape {
    x_in: Matrix,
    inv1: Vec<f64>,
    a: Matrix,
    q: Matrix,
    k: Matrix,
    // Cached keys: `k` itself (standard) or `k · Pᵀ` (projected-key).
    kc: Matrix,
    v: Matrix,
    // Projected-key only: mapped queries, one `T x c` matrix per head.
    qhat: Vec<Matrix>,
    probs: Vec<Matrix>,
    o: Matrix,
    h1: Matrix,
    inv2: Vec<f64>,
    b: Matrix,
    u: Matrix,
    act: Matrix,
}

pub(crate) struct Tape {
    tokens: Vec<u32>,
    layers: Vec<LayerTape>,
    x_final: Matrix,
    inv_final: Vec<f64>,
    f: Matrix,
    pub(crate) logits: Matrix,
}

pub(crate) fn forward_tape(ckpt: &Checkpoint, tokens: &[u32]) -> Result<Tape> {
    let c = &ckpt.config;
    let n = tokens.len();
    if n == 0 || n > c.max_seq_len {
        return Err(invalid(format!("sequence length {n} outside 1..={}", c.max_seq_len)));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(invalid(format!("token id {bad} >= vocab size {}", c.vocab_size)));
    }
    let dh = c.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = Matrix::zeros(n, c.d_model);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(ckpt.embedding.row(tok as usize));
    }
    let mut layers = Vec::with_capacity(c.n_layers);
    for layer in &ckpt.layers {
        let x_in = x.clone();
        let (a, inv1) = rms_norm(&x, &layer.attn_norm);
        let mut q = a.matmul(&layer.wq)?;
        let mut k = a.matmul(&layer.wk)?;
        let v = a.matmul(&layer.wv)?;
        if c.pos_encoding == PosEncoding::Rope {
            for t in 0..n {
                for h in q.row_mut(t).chunks_mut(dh) {
                    apply_rope(h, t, c.rope_theta)?;
                }
                for h in k.row_mut(t).chunks_mut(dh) {
                    apply_rope(h, t, c.rope_theta)?;
                }
            }
        }
        let (kc, qhat) = match c.attention_kind {
            AttentionKind::Standard => (k.clone(), Vec::new()),
            AttentionKind::ProjectedKey => {
                let p = layer.key_proj.as_ref().ok_or_else(|| invalid("missing key_proj"))?;
                let kc = k.matmul_t(p)?;
                let qhat = (0..c.n_heads)
                    .map(|i| q.columns(i * dh..(i + 1) * dh).matmul_t(&p.columns(i * dh..(i + 1) * dh)))
                    .collect::<Result<Vec<_>>>()?;
                (kc, qhat)
            }
        };
        let mut probs = Vec::with_capacity(c.n_heads);
        let mut o = Matrix::zeros(n, c.d_model);
        for i in 0..c.n_heads {
            let j = i / c.group_size();
            let slope = alibi_slope(i, c.n_heads);
            let mut p = Matrix::zeros(n, n);
            for t in 0..n {
                let row = p.row_mut(t);
                for r in 0..=t {
                    let s = match c.attention_kind {
                        AttentionKind::Standard => {
                            dot(&q.row(t)[i * dh..(i + 1) * dh], &k.row(r)[j * dh..(j + 1) * dh])
                        }
                        AttentionKind::ProjectedKey => dot(qhat[i].row(t), kc.row(r)),
                    };
                    row[r] = s * scale
                        - if c.pos_encoding == PosEncoding::Alibi { slope * (t - r) as f64 } else { 0.0 };
                }
                crate::model::softmax_in_place(&mut row[..=t]);
                let out = &mut o.row_mut(t)[i * dh..(i + 1) * dh];
                for r in 0..=t {
                    axpy(row[r], &v.row(r)[j * dh..(j + 1) * dh], out);
                }
            }
            probs.push(p);
        }
        let mut h1 = x_in.clone();
        h1.add_assign(&o.matmul(&layer.wo)?);
        let (b, inv2) = rms_norm(&h1, &layer.mlp_norm);
        let u = b.matmul(&layer.w1)?;
        let mut act = u.clone();
        act.data_mut().iter_mut().for_each(|z| *z = gelu(*z));
        let mut x_out = h1.clone();
        x_out.add_assign(&act.matmul(&layer.w2)?);
        layers.push(LayerTape { x_in, inv1, a, q, k, kc, v, qhat, probs, o, h1, inv2, b, u, act });
        x = x_out;
    }
    let (f, inv_final) = rms_norm(&x, &ckpt.final_norm);
    let logits = f.matmul_t(&ckpt.embedding)?;
    Ok(Tape { tokens: tokens.to_vec(), layers, x_final: x, inv_final, f, logits })
}

/// Sum of next-token NLL over non-PAD targets, and the count of such targets.
pub(crate) fn sequence_nll(logits: &Matrix, targets: &[u32]) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    for (t, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let row = logits.row(t);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y as usize];
        count += 1;
    }
    (total, count)
}

fn rms_backward(x: &Matrix, inv: &[f64], gain: &Matrix, dy: &Matrix, dgain: &mut Matrix) -> Matrix {
    let d = x.cols();
    let g = gain.data();
    let mut dx = Matrix::zeros(x.rows(), d);
    for t in 0..x.rows() {
        let s = inv[t];
        let xr = x.row(t);
        let dyr = dy.row(t);
        let mut proj = 0.0;
        {
            let dg = dgain.data_mut();
            for m in 0..d {
                let xhat = xr[m] * s;
                dg[m] += dyr[m] * xhat;
                proj += dyr[m] * g[m] * xhat;
            }
        }
        proj /= d as f64;
        for (m, out) in dx.row_mut(t).iter_mut().enumerate() {
            *out = s * (dyr[m] * g[m] - xr[m] * s * proj);
        }
    }
    dx
}

/// Adds into `grads` the gradient of `weight · Σ NLL(targets)`.
pub(crate) fn backward(ckpt: &Checkpoint, tape: &Tape, targets: &[u32], weight: f64, grads: &mut Checkpoint) -> Result<()> {
    let c = &ckpt.config;
    let n = tape.tokens.len();
    let dh = c.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dlogits = Matrix::zeros(n, c.vocab_size);
    for (t, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let row = tape.logits.row(t);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let dst = dlogits.row_mut(t);
        for (dv, &lv) in dst.iter_mut().zip(row) {
            *dv = weight * (lv - m).exp() / z;
        }
        dst[y as usize] -= weight;
    }
    grads.embedding.add_assign(&dlogits.t_matmul(&tape.f)?);
    let df = dlogits.matmul(&ckpt.embedding)?;
    let mut dx = rms_backward(&tape.x_final, &tape.inv_final, &ckpt.final_norm, &df, &mut grads.final_norm);

    for (li, (layer, lt)) in ckpt.layers.iter().zip(&tape.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        // MLP branch.
        g.w2.add_assign(&lt.act.t_matmul(&dx)?);
        let mut du = dx.matmul_t(&layer.w2)?;
        for (d, &u) in du.data_mut().iter_mut().zip(lt.u.data()) {
            *d *= gelu_grad(u);
        }
        g.w1.add_assign(&lt.b.t_matmul(&du)?);
        let db = du.matmul_t(&layer.w1)?;
        let mut dh1 = rms_backward(&lt.h1, &lt.inv2, &layer.mlp_norm, &db, &mut g.mlp_norm);
        dh1.add_assign(&dx);

        // Attention branch.
        g.wo.add_assign(&lt.o.t_matmul(&dh1)?);
        let d_o = dh1.matmul_t(&layer.wo)?;
        let mut dq = Matrix::zeros(n, c.d_model);
        let mut dk = Matrix::zeros(n, lt.k.cols());
        let mut dkc = Matrix::zeros(n, lt.kc.cols());
        let mut dv = Matrix::zeros(n, lt.v.cols());
        let mut dqhat_row = vec![0.0; lt.kc.cols()];
        for i in 0..c.n_heads {
            let j = i / c.group_size();
            let p = &lt.probs[i];
            let mut ds = vec![0.0; n];
            for t in 0..n {
                let dor = &d_o.row(t)[i * dh..(i + 1) * dh];
                let prow = p.row(t);
                let mut mean = 0.0;
                for r in 0..=t {
                    let dp = dot(dor, &lt.v.row(r)[j * dh..(j + 1) * dh]);
                    ds[r] = dp;
                    mean += prow[r] * dp;
                    axpy(prow[r], dor, &mut dv.row_mut(r)[j * dh..(j + 1) * dh]);
                }
                for r in 0..=t {
                    ds[r] = prow[r] * (ds[r] - mean) * scale;
                }
                match c.attention_kind {
                    AttentionKind::Standard => {
                        for r in 0..=t {
                            if ds[r] == 0.0 {
                                continue;
                            }
                            let kr = &lt.k.row(r)[j * dh..(j + 1) * dh];
                            axpy(ds[r], kr, &mut dq.row_mut(t)[i * dh..(i + 1) * dh]);
                            let qt = &lt.q.row(t)[i * dh..(i + 1) * dh];
                            axpy(ds[r], qt, &mut dk.row_mut(r)[j * dh..(j + 1) * dh]);
                        }
                    }
                    AttentionKind::ProjectedKey => {
                        dqhat_row.iter_mut().for_each(|x| *x = 0.0);
                        for r in 0..=t {
                            axpy(ds[r], lt.kc.row(r), &mut dqhat_row);
                            axpy(ds[r], lt.qhat[i].row(t), dkc.row_mut(r));
                        }
                        let proj = layer.key_proj.as_ref().expect("tape built with key_proj");
                        let dqr = &mut dq.row_mut(t)[i * dh..(i + 1) * dh];
                        for (cc, &w) in dqhat_row.iter().enumerate() {
                            axpy(w, &proj.row(cc)[i * dh..(i + 1) * dh], dqr);
                        }
                    }
                }
            }
        }
        if c.attention_kind == AttentionKind::ProjectedKey {
            let proj = layer.key_proj.as_ref().expect("tape built with key_proj");
            dk = dkc.matmul(proj)?;
        }
        if c.pos_encoding == PosEncoding::Rope {
            for t in 0..n {
                for h in dq.row_mut(t).chunks_mut(dh) {
                    apply_rope_inverse(h, t, c.rope_theta)?;
                }
                for h in dk.row_mut(t).chunks_mut(dh) {
                    apply_rope_inverse(h, t, c.rope_theta)?;
                }
            }
        }
        g.wq.add_assign(&lt.a.t_matmul(&dq)?);
        g.wk.add_assign(&lt.a.t_matmul(&dk)?);
        g.wv.add_assign(&lt.a.t_matmul(&dv)?);
        let mut da = dq.matmul_t(&layer.wq)?;
        da.add_assign(&dk.matmul_t(&layer.wk)?);
        da.add_assign(&dv.matmul_t(&layer.wv)?);
        let mut dx_in = rms_backward(&lt.x_in, &lt.inv1, &layer.attn_norm, &da, &mut g.attn_norm);
        dx_in.add_assign(&dh1);
        dx = dx_in;
    }
    for (t, &tok) in tape.tokens.iter().enumerate() {
        axpy(1.0, dx.row(t), grads.embedding.row_mut(tok as usize));
    }
    Ok(())
}
