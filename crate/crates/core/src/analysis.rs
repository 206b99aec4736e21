//! Low-rank diagnostics: energy-ratio curves over the cache spectra and
//! reconstruction errors of projected caches on held-out data.
//!
//! CSV schemas (header mandatory, floats with 9 significant digits):
//! `layer,kind,group,fraction,energy_ratio` and
//! `layer,kind,group,rel_frob_error`.

use std::fmt;
use std::io::Write;

use crate::calibration::GramSet;
use crate::compress::{KeyBasis, ProjectionSet};
use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::linalg::{energy_ratio, projection_error, sym_eig, GramAccumulator, Matrix, Projection};
use crate::model::{forward_with_probe, Checkpoint};

pub const DEFAULT_FRACTIONS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CacheKind {
    KeyPreRope,
    KeyPostRope,
    Value,
    /// All key heads of a layer after RoPE, taken as one block.
    KeyWholePostRope,
}

impl fmt::Display for CacheKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::KeyPreRope => "K_pre_rope",
            Self::KeyPostRope => "K_post_rope",
            Self::Value => "V",
            Self::KeyWholePostRope => "K_whole_post_rope",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRow {
    pub layer: usize,
    pub kind: CacheKind,
    pub group: usize,
    pub fraction: f64,
    pub energy_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionRow {
    pub layer: usize,
    pub kind: CacheKind,
    pub group: usize,
    pub rel_frob_error: f64,
}

/// Retained dimension for a fraction of `dim`.
pub fn retained_dim(fraction: f64, dim: usize) -> usize {
    ((fraction * dim as f64).ceil() as usize).clamp(1, dim)
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(invalid("at least one fraction is required"));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(invalid(format!("fraction {f} outside (0, 1]")));
    }
    Ok(())
}

/// Energy kept by the top `⌈f·dim⌉` eigenvalues of every cache Gram, for
/// each fraction `f`. Rows are ordered by layer, kind, group, fraction.
pub fn spectrum_report(grams: &GramSet, fractions: &[f64]) -> Result<Vec<SpectrumRow>> {
    check_fractions(fractions)?;
    if grams.layers.is_empty() || grams.token_count() == 0 {
        return Err(invalid("gram set is empty"));
    }
    let mut rows = Vec::new();
    for (layer, lg) in grams.layers.iter().enumerate() {
        let mut blocks: Vec<(CacheKind, &[GramAccumulator])> = Vec::new();
        if let Some(k) = &lg.key_pre {
            blocks.push((CacheKind::KeyPreRope, k));
        }
        if let Some(k) = &lg.key_post {
            blocks.push((CacheKind::KeyPostRope, k));
        }
        blocks.push((CacheKind::Value, &lg.values));
        if let Some(k) = &lg.whole_key {
            blocks.push((CacheKind::KeyWholePostRope, std::slice::from_ref(k)));
        }
        for (kind, accs) in blocks {
            for (group, acc) in accs.iter().enumerate() {
                let eig = sym_eig(&acc.sum())?;
                for &fraction in fractions {
                    let k = retained_dim(fraction, acc.dim());
                    rows.push(SpectrumRow {
                        layer,
                        kind,
                        group,
                        fraction,
                        energy_ratio: energy_ratio(&eig.eigenvalues, k)?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Every cache of every layer over a corpus, rows concatenated across chunks.
#[derive(Debug, Clone)]
pub struct LayerCaches {
    pub keys_pre_rope: Matrix,
    pub keys_post_rope: Matrix,
    pub values: Matrix,
}

pub fn materialize_caches(ckpt: &Checkpoint, corpus: &Corpus, seq_len: usize) -> Result<Vec<LayerCaches>> {
    if corpus.is_empty() {
        return Err(invalid("corpus is empty"));
    }
    if seq_len == 0 {
        return Err(invalid("seq_len must be positive"));
    }
    let c = &ckpt.config;
    let mut parts: Vec<[Vec<Matrix>; 3]> = (0..c.n_layers).map(|_| Default::default()).collect();
    for chunk in corpus.chunks(seq_len.min(c.max_seq_len), 1) {
        forward_with_probe(ckpt, chunk, &mut |p| {
            let slot = &mut parts[p.layer];
            slot[0].push(p.keys_pre_rope.clone());
            slot[1].push(p.keys_post_rope.clone());
            slot[2].push(p.values.clone());
        })?;
    }
    parts
        .into_iter()
        .map(|[kp, kq, v]| {
            Ok(LayerCaches {
                keys_pre_rope: vstack(&kp)?,
                keys_post_rope: vstack(&kq)?,
                values: vstack(&v)?,
            })
        })
        .collect()
}

fn vstack(parts: &[Matrix]) -> Result<Matrix> {
    let cols = parts.first().map_or(0, Matrix::cols);
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Matrix::from_vec(data.len() / cols.max(1), cols, data)
}

/// `‖X − XPᵀP‖_F / ‖X‖_F`, or 0 for an all-zero `X`.
pub fn relative_error(x: &Matrix, p: &Projection) -> Result<f64> {
    let norm = x.frobenius_norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    Ok(projection_error(x, p)? / norm)
}

/// Relative reconstruction error of each cache under `projections`, measured
/// on the caches `ckpt` produces over `corpus`.
pub fn cache_reconstruction_report(
    ckpt: &Checkpoint,
    projections: &ProjectionSet,
    corpus: &Corpus,
    seq_len: usize,
) -> Result<Vec<ReconstructionRow>> {
    let hash = ckpt.fingerprint();
    if projections.source_hash != hash {
        return Err(Error::Consistency(format!(
            "projections were derived from checkpoint {} but the given checkpoint is {hash}",
            projections.source_hash
        )));
    }
    let c = &ckpt.config;
    if projections.layers.len() != c.n_layers {
        return Err(Error::Consistency(format!(
            "projection set has {} layers, checkpoint has {}",
            projections.layers.len(),
            c.n_layers
        )));
    }
    let caches = materialize_caches(ckpt, corpus, seq_len)?;
    let gd = c.n_heads / projections.groups * c.head_dim;
    let mut rows = Vec::new();
    for (layer, (lp, lc)) in projections.layers.iter().zip(&caches).enumerate() {
        let (kind, keys) = match lp.key_basis {
            KeyBasis::GroupedPreRope => (CacheKind::KeyPreRope, &lc.keys_pre_rope),
            KeyBasis::GroupedPostRope => (CacheKind::KeyPostRope, &lc.keys_post_rope),
            KeyBasis::Whole => (CacheKind::KeyWholePostRope, &lc.keys_post_rope),
        };
        let blocks = [(kind, keys, &lp.keys), (CacheKind::Value, &lc.values, &lp.values)];
        for (kind, data, projs) in blocks {
            for (group, gp) in projs.iter().enumerate() {
                let x = if kind == CacheKind::KeyWholePostRope {
                    data.clone()
                } else {
                    data.columns(group * gd..(group + 1) * gd)
                };
                rows.push(ReconstructionRow { layer, kind, group, rel_frob_error: relative_error(&x, &gp.projection)? });
            }
        }
    }
    Ok(rows)
}

pub fn write_spectrum_csv(out: &mut dyn Write, rows: &[SpectrumRow]) -> Result<()> {
    writeln!(out, "layer,kind,group,fraction,energy_ratio")?;
    for r in rows {
        writeln!(out, "{},{},{},{:.8e},{:.8e}", r.layer, r.kind, r.group, r.fraction, r.energy_ratio)?;
    }
    Ok(())
}

pub fn write_reconstruction_csv(out: &mut dyn Write, rows: &[ReconstructionRow]) -> Result<()> {
    writeln!(out, "layer,kind,group,rel_frob_error")?;
    for r in rows {
        writeln!(out, "{},{},{},{:.8e}", r.layer, r.kind, r.group, r.rel_frob_error)?;
    }
    Ok(())
}

/// Mean energy ratio per (layer, kind, fraction), one line each.
pub fn spectrum_summary(rows: &[SpectrumRow]) -> String {
    let mut keys: Vec<(usize, CacheKind, u64)> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        let key = (r.layer, r.kind, r.fraction.to_bits());
        let i = keys.iter().position(|k| *k == key).unwrap_or_else(|| {
            keys.push(key);
            sums.push((0.0, 0));
            keys.len() - 1
        });
        sums[i].0 += r.energy_ratio;
        sums[i].1 += 1;
    }
    let mut s = format!("{:>5}  {:<18} {:>8}  {:>12}\n", "layer", "kind", "fraction", "mean energy");
    for ((layer, kind, f), (sum, n)) in keys.iter().zip(&sums) {
        let kind = kind.to_string();
        s += &format!("{layer:>5}  {kind:<18} {:>8.3}  {:>12.6}\n", f64::from_bits(*f), sum / *n as f64);
    }
    s
}

pub fn reconstruction_summary(rows: &[ReconstructionRow]) -> String {
    let mut s = format!("{:>5}  {:<18} {:>12}  {:>12}\n", "layer", "kind", "mean error", "max error");
    let mut i = 0;
    while i < rows.len() {
        let (layer, kind) = (rows[i].layer, rows[i].kind);
        let mut j = i;
        let (mut sum, mut max) = (0.0, 0.0f64);
        while j < rows.len() && rows[j].layer == layer && rows[j].kind == kind {
            sum += rows[j].rel_frob_error;
            max = max.max(rows[j].rel_frob_error);
            j += 1;
        }
        let kind = kind.to_string();
        s += &format!("{layer:>5}  {kind:<18} {:>12.6}  {:>12.6}\n", sum / (j - i) as f64, max);
        i = j;
    }
    s
}
