//! MHA → GQA conversion.
//!
//! Three strategies produce a checkpoint with `g` KV heads:
//! - `mean-pool`: average the key/value head weights of each group.
//! - `svd-w`: per group, project onto the top-`d_h` right singular vectors of
//!   the horizontally concatenated head weights.
//! - `svd-a`: per group, project onto the top-`d_h` eigenvectors of the
//!   cache Gram `K̃ᵀK̃` (resp. `ṼᵀṼ`) collected on calibration data.
//!
//! Projections are folded into the weights: `W̃_K = [W_K group]·Ψᵀ`, and every
//! query head `i` of group `p` at slot `q` gets `W̃_Q_i = W_Q_i·Ψ_qᵀ`, where
//! `Ψ_q` is the `q`-th `d_h`-column block of `Ψ`. Values fold into `W_V` and
//! `W_O` the same way with `Ω`. With RoPE the key fusion is invalid (the
//! rotation sits between `W_Q` and `W_K`), so keys instead use the
//! projected-key cache: `W_K` is kept and the cache stores `RoPE(xW_K)·Pᵀ`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{check_psd, GramSet};
use crate::error::{invalid, Error, Result};
use crate::linalg::{rank_k_projection, sym_eig, GramAccumulator, Matrix, Projection};
use crate::model::{AttentionKind, Checkpoint, PosEncoding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    MeanPool,
    SvdW,
    SvdA,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-pool" => Ok(Self::MeanPool),
            "svd-w" => Ok(Self::SvdW),
            "svd-a" => Ok(Self::SvdA),
            _ => Err(invalid(format!("unknown strategy {s:?} (mean-pool, svd-w, svd-a)"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MeanPool => "mean-pool",
            Self::SvdW => "svd-w",
            Self::SvdA => "svd-a",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RopeMode {
    Fused,
    ProjectedKey,
}

impl FromStr for RopeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Self::Fused),
            "projected-key" => Ok(Self::ProjectedKey),
            _ => Err(invalid(format!("unknown rope mode {s:?} (fused, projected-key)"))),
        }
    }
}

/// How the projected-key basis is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyGrouping {
    /// One `g·d_h`-rank basis over all `h` key heads of the layer.
    Whole,
    /// Block-diagonal: one `d_h`-rank basis per group of `t` heads.
    Grouped,
}

impl FromStr for KeyGrouping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(Self::Whole),
            "grouped" => Ok(Self::Grouped),
            _ => Err(invalid(format!("unknown key grouping {s:?} (whole, grouped)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub strategy: Strategy,
    pub groups: usize,
    pub rope_mode: RopeMode,
    pub key_grouping: KeyGrouping,
}

impl CompressionPlan {
    /// Validates against the source model. `rope_mode: None` picks
    /// projected-key for RoPE models under the SVD strategies, fused otherwise.
    pub fn new(
        strategy: Strategy,
        groups: usize,
        rope_mode: Option<RopeMode>,
        key_grouping: KeyGrouping,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let c = &ckpt.config;
        if groups == 0 || c.n_heads % groups != 0 {
            return Err(invalid(format!("groups must divide heads ({groups} does not divide {})", c.n_heads)));
        }
        if !c.is_mha() {
            return Err(invalid("compression needs a multi-head-attention source checkpoint"));
        }
        let rope = c.pos_encoding == PosEncoding::Rope;
        let rope_mode = rope_mode.unwrap_or(if rope && strategy != Strategy::MeanPool {
            RopeMode::ProjectedKey
        } else {
            RopeMode::Fused
        });
        match rope_mode {
            RopeMode::ProjectedKey if !rope => {
                return Err(invalid("projected-key mode is only legal for RoPE models"));
            }
            RopeMode::ProjectedKey if strategy == Strategy::MeanPool => {
                return Err(invalid("mean-pool keeps standard GQA attention; use --rope-mode fused"));
            }
            RopeMode::Fused if rope && strategy != Strategy::MeanPool => {
                return Err(invalid(
                    "fusing key projections into W_Q/W_K is invalid under RoPE; use --rope-mode projected-key",
                ));
            }
            _ => {}
        }
        Ok(Self { strategy, groups, rope_mode, key_grouping })
    }
}

/// An orthonormal basis together with the spectrum it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupProjection {
    pub projection: Projection,
    pub eigenvalues: Vec<f64>,
}

/// What data a layer's key projection applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyBasis {
    /// Per group, pre-RoPE `x W_K` head slices.
    GroupedPreRope,
    /// Per group, post-RoPE head slices (block-diagonal projected key).
    GroupedPostRope,
    /// One basis across all post-RoPE key heads.
    Whole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProjections {
    pub key_basis: KeyBasis,
    /// One entry per group, or a single entry for [`KeyBasis::Whole`].
    pub keys: Vec<GroupProjection>,
    pub values: Vec<GroupProjection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub source_hash: String,
    pub groups: usize,
    pub head_dim: usize,
    /// Retained rank per group (whole-layer key bases keep `rank·groups`).
    pub rank: usize,
    pub layers: Vec<LayerProjections>,
}

impl ProjectionSet {
    pub fn max_orthonormality_defect(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.keys.iter().chain(&l.values))
            .map(|g| g.projection.orthonormality_defect())
            .fold(0.0, f64::max)
    }
}

pub fn compression_ratio(n_heads: usize, groups: usize) -> Result<f64> {
    if groups == 0 || n_heads == 0 || n_heads % groups != 0 {
        return Err(invalid(format!("groups must divide heads ({groups} does not divide {n_heads})")));
    }
    Ok(1.0 - groups as f64 / n_heads as f64)
}

fn decompose(gram: &Matrix, rank: usize) -> Result<GroupProjection> {
    let eig = sym_eig(gram)?;
    check_psd(gram, *eig.eigenvalues.last().unwrap_or(&0.0))?;
    let projection = rank_k_projection(&eig, rank)?;
    Ok(GroupProjection { projection, eigenvalues: eig.clamped_eigenvalues() })
}

fn from_accumulators(accs: &[GramAccumulator], rank: usize) -> Result<Vec<GroupProjection>> {
    accs.iter().map(|a| decompose(&a.sum(), rank)).collect()
}

fn check_rank(rank: usize, group_dim: usize) -> Result<()> {
    if rank == 0 || rank > group_dim {
        return Err(invalid(format!("rank {rank} outside 1..={group_dim}")));
    }
    Ok(())
}

/// Activation-derived projections from calibration Grams. `rank` defaults to
/// `d_h`; other values are for analysis only.
pub fn svd_a_projections(
    ckpt: &Checkpoint,
    grams: &GramSet,
    plan: &CompressionPlan,
    rank: Option<usize>,
) -> Result<ProjectionSet> {
    grams.check_matches(ckpt)?;
    if grams.groups != plan.groups {
        return Err(Error::Consistency(format!(
            "grams were grouped into {} groups but the plan asks for {}",
            grams.groups, plan.groups
        )));
    }
    let c = &ckpt.config;
    let rank = rank.unwrap_or(c.head_dim);
    check_rank(rank, grams.group_dim())?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for (li, lg) in grams.layers.iter().enumerate() {
        let (key_basis, keys) = match (plan.rope_mode, plan.key_grouping) {
            (RopeMode::Fused, _) => {
                let accs = lg.key_pre.as_ref().ok_or_else(|| {
                    Error::Consistency(format!("layer {li}: grams lack pre-RoPE key statistics"))
                })?;
                (KeyBasis::GroupedPreRope, from_accumulators(accs, rank)?)
            }
            (RopeMode::ProjectedKey, KeyGrouping::Grouped) => {
                let accs = lg.key_post.as_ref().ok_or_else(|| {
                    Error::Consistency(format!("layer {li}: grams lack post-RoPE key statistics"))
                })?;
                (KeyBasis::GroupedPostRope, from_accumulators(accs, rank)?)
            }
            (RopeMode::ProjectedKey, KeyGrouping::Whole) => {
                let acc = lg.whole_key.as_ref().ok_or_else(|| {
                    Error::Consistency(format!("layer {li}: grams lack whole-layer key statistics"))
                })?;
                (KeyBasis::Whole, vec![decompose(&acc.sum(), rank * plan.groups)?])
            }
        };
        let values = from_accumulators(&lg.values, rank)?;
        layers.push(LayerProjections { key_basis, keys, values });
    }
    Ok(ProjectionSet { source_hash: grams.checkpoint_hash.clone(), groups: plan.groups, head_dim: c.head_dim, rank, layers })
}

/// Weight-derived projections: right singular vectors of the concatenated
/// group weights, via the eigenvectors of `ŴᵀŴ`.
pub fn svd_w_projections(ckpt: &Checkpoint, plan: &CompressionPlan, rank: Option<usize>) -> Result<ProjectionSet> {
    let c = &ckpt.config;
    let gd = c.n_heads / plan.groups * c.head_dim;
    let rank = rank.unwrap_or(c.head_dim);
    check_rank(rank, gd)?;
    let gram_of = |w: &Matrix| w.t_matmul(w);
    let mut layers = Vec::with_capacity(c.n_layers);
    for layer in &ckpt.layers {
        let grouped = |w: &Matrix| -> Result<Vec<GroupProjection>> {
            (0..plan.groups).map(|p| decompose(&gram_of(&w.columns(p * gd..(p + 1) * gd))?, rank)).collect()
        };
        let (key_basis, keys) = match (plan.rope_mode, plan.key_grouping) {
            (RopeMode::Fused, _) => (KeyBasis::GroupedPreRope, grouped(&layer.wk)?),
            // RoPE is orthogonal per position, so weight SVD of a group is
            // the same whether or not it is applied.
            (RopeMode::ProjectedKey, KeyGrouping::Grouped) => (KeyBasis::GroupedPostRope, grouped(&layer.wk)?),
            (RopeMode::ProjectedKey, KeyGrouping::Whole) => {
                (KeyBasis::Whole, vec![decompose(&gram_of(&layer.wk)?, rank * plan.groups)?])
            }
        };
        let values = grouped(&layer.wv)?;
        layers.push(LayerProjections { key_basis, keys, values });
    }
    Ok(ProjectionSet { source_hash: ckpt.fingerprint(), groups: plan.groups, head_dim: c.head_dim, rank, layers })
}

/// Averages key and value head weights within each group.
pub fn mean_pool_compress(ckpt: &Checkpoint, groups: usize) -> Result<Checkpoint> {
    let c = &ckpt.config;
    if !c.is_mha() {
        return Err(invalid("mean-pool needs a multi-head-attention source checkpoint"));
    }
    if groups == 0 || c.n_heads % groups != 0 {
        return Err(invalid(format!("groups must divide heads ({groups} does not divide {})", c.n_heads)));
    }
    let t = c.n_heads / groups;
    let dh = c.head_dim;
    let pool = |w: &Matrix| -> Matrix {
        let mut out = Matrix::zeros(w.rows(), groups * dh);
        for p in 0..groups {
            let mut acc = Matrix::zeros(w.rows(), dh);
            for m in 0..t {
                let h = p * t + m;
                acc.add_assign(&w.columns(h * dh..(h + 1) * dh));
            }
            acc.scale(1.0 / t as f64);
            out.set_columns(p * dh, &acc);
        }
        out
    };
    let mut out = ckpt.clone();
    out.config.n_kv_heads = groups;
    for l in &mut out.layers {
        if t > 1 {
            l.wk = pool(&l.wk);
            l.wv = pool(&l.wv);
        }
    }
    out.round_to_f32();
    out.validate()?;
    Ok(out)
}

/// Folds a projection set into the source weights.
pub fn apply_projections(ckpt: &Checkpoint, proj: &ProjectionSet, plan: &CompressionPlan) -> Result<Checkpoint> {
    let c = &ckpt.config;
    if proj.source_hash != ckpt.fingerprint() {
        return Err(Error::Consistency(format!(
            "projections were derived from checkpoint {} but the given checkpoint is {}",
            proj.source_hash,
            ckpt.fingerprint()
        )));
    }
    if proj.rank != c.head_dim {
        return Err(invalid(format!(
            "GQA output needs rank = head_dim ({}); rank {} is analysis-only",
            c.head_dim, proj.rank
        )));
    }
    let g = plan.groups;
    let t = c.n_heads / g;
    let dh = c.head_dim;
    let mut out = ckpt.clone();
    out.config.n_kv_heads = g;
    if plan.rope_mode == RopeMode::ProjectedKey {
        out.config.attention_kind = AttentionKind::ProjectedKey;
    }
    for (layer, lp) in out.layers.iter_mut().zip(&proj.layers) {
        // Values: W̃_V_p = [W_V group]·Ωᵀ;  W̃_O_i = Ω_q · W_O_i.
        let mut wv = Matrix::zeros(c.d_model, g * dh);
        let mut wo = layer.wo.clone();
        for p in 0..g {
            let omega = &lp.values[p].projection.basis;
            let block = layer.wv.columns(p * t * dh..(p + 1) * t * dh);
            wv.set_columns(p * dh, &block.matmul_t(omega)?);
            for q in 0..t {
                let i = p * t + q;
                let omega_q = omega.columns(q * dh..(q + 1) * dh);
                wo.set_rows(i * dh, &omega_q.matmul(&layer.wo.row_block(i * dh..(i + 1) * dh))?);
            }
        }
        layer.wv = wv;
        layer.wo = wo;

        match plan.rope_mode {
            RopeMode::Fused => {
                let mut wk = Matrix::zeros(c.d_model, g * dh);
                let mut wq = layer.wq.clone();
                for p in 0..g {
                    let psi = &lp.keys[p].projection.basis;
                    let block = layer.wk.columns(p * t * dh..(p + 1) * t * dh);
                    wk.set_columns(p * dh, &block.matmul_t(psi)?);
                    for q in 0..t {
                        let i = p * t + q;
                        let psi_q = psi.columns(q * dh..(q + 1) * dh);
                        wq.set_columns(i * dh, &layer.wq.columns(i * dh..(i + 1) * dh).matmul_t(&psi_q)?);
                    }
                }
                layer.wk = wk;
                layer.wq = wq;
            }
            RopeMode::ProjectedKey => {
                let full = c.n_heads * dh;
                let key_proj = match lp.key_basis {
                    KeyBasis::Whole => lp.keys[0].projection.basis.clone(),
                    KeyBasis::GroupedPostRope | KeyBasis::GroupedPreRope => {
                        let mut kp = Matrix::zeros(g * dh, full);
                        for p in 0..g {
                            let psi = &lp.keys[p].projection.basis;
                            for r in 0..dh {
                                kp.row_mut(p * dh + r)[p * t * dh..(p + 1) * t * dh].copy_from_slice(psi.row(r));
                            }
                        }
                        kp
                    }
                };
                layer.key_proj = Some(key_proj);
            }
        }
    }
    out.round_to_f32();
    out.validate()?;
    Ok(out)
}

pub fn svd_w_compress(ckpt: &Checkpoint, plan: &CompressionPlan) -> Result<Checkpoint> {
    let proj = svd_w_projections(ckpt, plan, None)?;
    apply_projections(ckpt, &proj, plan)
}

pub fn svd_a_compress(ckpt: &Checkpoint, grams: &GramSet, plan: &CompressionPlan) -> Result<Checkpoint> {
    let proj = svd_a_projections(ckpt, grams, plan, None)?;
    apply_projections(ckpt, &proj, plan)
}

/// Dispatches on `plan.strategy`; `grams` is required for `svd-a`.
pub fn compress(ckpt: &Checkpoint, grams: Option<&GramSet>, plan: &CompressionPlan) -> Result<Checkpoint> {
    match plan.strategy {
        Strategy::MeanPool => mean_pool_compress(ckpt, plan.groups),
        Strategy::SvdW => svd_w_compress(ckpt, plan),
        Strategy::SvdA => {
            let grams = grams.ok_or_else(|| invalid("svd-a needs calibration grams"))?;
            svd_a_compress(ckpt, grams, plan)
        }
    }
}
