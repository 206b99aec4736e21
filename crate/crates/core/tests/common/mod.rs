//! Naive reference transformer used as an oracle by the integration tests.
//!
//! Everything is recomputed from scratch for the full sequence in f64 with
//! no cache, directly from the model definition. Optional per-layer cache
//! projections replace post-RoPE keys `K` by `K·PᵀP` and values `V` by
//! `V·QᵀQ` (full `h·d_h` width, so block-diagonal bases express per-group
//! projections).
#![allow(dead_code)]

use kvshrink::compress::{KeyBasis, ProjectionSet};
use kvshrink::model::{AttentionKind, Checkpoint, PosEncoding};
use kvshrink::train::{loss, loss_and_grads};
use kvshrink::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..256)).collect()
}

#[derive(Clone, Default)]
pub struct CacheProjections {
    /// Per layer, `r × h·d_h` orthonormal rows applied to post-RoPE keys.
    pub keys: Vec<Option<Matrix>>,
    pub values: Vec<Option<Matrix>>,
}

fn rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(gain).map(|(a, g)| a * s * g).collect()
}

fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|j| (0..w.rows()).map(|i| x[i] * w[(i, j)]).sum()).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn rope(v: &mut [f64], pos: usize, theta: f64) {
    let dh = v.len();
    for j in 0..dh / 2 {
        let ang = pos as f64 * theta.powf(-((2 * j) as f64) / dh as f64);
        let (a, b) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = a * ang.cos() - b * ang.sin();
        v[2 * j + 1] = a * ang.sin() + b * ang.cos();
    }
}

/// Rows of `x` (n × m) replaced by `x·PᵀP`.
fn project_rows(x: &mut [Vec<f64>], p: &Matrix) {
    for row in x.iter_mut() {
        let coef: Vec<f64> = (0..p.rows()).map(|r| (0..p.cols()).map(|c| row[c] * p[(r, c)]).sum()).collect();
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..p.rows()).map(|r| coef[r] * p[(r, c)]).sum();
        }
    }
}

pub fn reference_logits(ck: &Checkpoint, tokens: &[u32], proj: Option<&CacheProjections>) -> Matrix {
    let c = &ck.config;
    let (h, dh, n) = (c.n_heads, c.head_dim, tokens.len());
    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| ck.embedding.row(t as usize).to_vec()).collect();
    for (l, layer) in ck.layers.iter().enumerate() {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms(x, layer.attn_norm.data())).collect();
        let mut q: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &layer.wq)).collect();
        let mut k: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &layer.wk)).collect();
        let mut v: Vec<Vec<f64>> = normed.iter().map(|x| vec_mat(x, &layer.wv)).collect();
        if c.pos_encoding == PosEncoding::Rope {
            for t in 0..n {
                for i in 0..h {
                    rope(&mut q[t][i * dh..(i + 1) * dh], t, c.rope_theta);
                }
                for i in 0..k[t].len() / dh {
                    rope(&mut k[t][i * dh..(i + 1) * dh], t, c.rope_theta);
                }
            }
        }
        if let Some(p) = proj {
            if let Some(pk) = &p.keys[l] {
                project_rows(&mut k, pk);
            }
            if let Some(pv) = &p.values[l] {
                project_rows(&mut v, pv);
            }
        }
        let projected = c.attention_kind == AttentionKind::ProjectedKey;
        if projected {
            // Projected-key checkpoints cache k·Pᵀ; the score q·Pᵢᵀ·(k·Pᵀ)
            // equals q·(k·PᵀP)ᵢ, so project the full keys and attend per head.
            project_rows(&mut k, layer.key_proj.as_ref().unwrap());
        }
        let t_group = h / c.n_kv_heads;
        let mut attn_out = vec![vec![0.0; h * dh]; n];
        for i in 0..h {
            let kv = i / t_group;
            let kcol = if projected { i * dh } else { kv * dh };
            let slope = 2f64.powf(-8.0 * (i + 1) as f64 / h as f64);
            for t in 0..n {
                let qi = &q[t][i * dh..(i + 1) * dh];
                let mut s: Vec<f64> = (0..=t)
                    .map(|j| {
                        let dot: f64 = qi.iter().zip(&k[j][kcol..kcol + dh]).map(|(a, b)| a * b).sum();
                        let bias = if c.pos_encoding == PosEncoding::Alibi { -slope * (t - j) as f64 } else { 0.0 };
                        dot / (dh as f64).sqrt() + bias
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter_mut().map(|x| { *x = (*x - m).exp(); *x }).sum();
                for (j, w) in s.iter().enumerate() {
                    for e in 0..dh {
                        attn_out[t][i * dh + e] += w / z * v[j][kv * dh + e];
                    }
                }
            }
        }
        for t in 0..n {
            let o = vec_mat(&attn_out[t], &layer.wo);
            for (a, b) in xs[t].iter_mut().zip(o) {
                *a += b;
            }
            let h2 = rms(&xs[t], layer.mlp_norm.data());
            let u: Vec<f64> = vec_mat(&h2, &layer.w1).into_iter().map(gelu).collect();
            let m = vec_mat(&u, &layer.w2);
            for (a, b) in xs[t].iter_mut().zip(m) {
                *a += b;
            }
        }
    }
    let mut out = Matrix::zeros(n, c.vocab_size);
    for t in 0..n {
        let f = rms(&xs[t], ck.final_norm.data());
        for vtok in 0..c.vocab_size {
            out.row_mut(t)[vtok] = f.iter().zip(ck.embedding.row(vtok)).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Block-diagonal `(groups·r) × (groups·width)` from per-group bases.
pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let r: usize = blocks.iter().map(|b| b.rows()).sum();
    let w: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Matrix::zeros(r, w);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows() {
            out.row_mut(r0 + i)[c0..c0 + b.cols()].copy_from_slice(b.row(i));
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    out
}

/// Cache projections equivalent to a projection set.
pub fn cache_projections(set: &ProjectionSet) -> CacheProjections {
    let mut out = CacheProjections::default();
    for l in &set.layers {
        let keys = match l.key_basis {
            KeyBasis::Whole => l.keys[0].projection.basis.clone(),
            _ => block_diag(&l.keys.iter().map(|g| &g.projection.basis).collect::<Vec<_>>()),
        };
        out.keys.push(Some(keys));
        out.values.push(Some(block_diag(&l.values.iter().map(|g| &g.projection.basis).collect::<Vec<_>>())));
    }
    out
}

pub struct GradError {
    pub name: String,
    /// `‖a − n‖_F / max(‖a‖_F, ‖n‖_F)` over the tensor.
    pub rel: f64,
    /// Worst `|a − n| / (max(|a|, |n|) + 1e-6)` over entries.
    pub worst: f64,
}

/// Analytic gradients against central differences (step 1e-4) for every
/// trainable tensor on a fixed two-sequence batch.
pub fn gradient_errors(ck: &Checkpoint) -> Vec<GradError> {
    let batch = vec![vec![3u32, 17, 42, 256, 9, 9, 100, 4], vec![7u32, 1, 2, 3, 254, 11]];
    let (_, mut grads) = loss_and_grads(ck, &batch).unwrap();
    let eps = 1e-4;
    let analytic: Vec<(String, Matrix)> = grads.trainable_mut().into_iter().map(|(n, m)| (n, m.clone())).collect();
    let mut perturbed = ck.clone();
    let mut out = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut fd = Matrix::zeros(g.rows(), g.cols());
        for idx in 0..g.data().len() {
            let orig = {
                let mut ts = perturbed.trainable_mut();
                let v = ts[ti].1.data()[idx];
                ts[ti].1.data_mut()[idx] = v + eps;
                v
            };
            let up = loss(&perturbed, &batch).unwrap();
            perturbed.trainable_mut()[ti].1.data_mut()[idx] = orig - eps;
            let down = loss(&perturbed, &batch).unwrap();
            perturbed.trainable_mut()[ti].1.data_mut()[idx] = orig;
            fd.data_mut()[idx] = (up - down) / (2.0 * eps);
        }
        let diff = g.sub(&fd).unwrap().frobenius_norm();
        let scale = g.frobenius_norm().max(fd.frobenius_norm());
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        let worst = g
            .data()
            .iter()
            .zip(fd.data())
            .map(|(a, b)| (a - b).abs() / (a.abs().max(b.abs()) + 1e-6))
            .fold(0.0, f64::max);
        out.push(GradError { name: name.clone(), rel, worst });
    }
    out
}
