//! Streaming collection of per-layer, per-group Gram matrices of the key and
//! value caches over a calibration corpus, and the `KVGR` file format.
//!
//! Gram file (little-endian): `"KVGR" | u32 version = 1 | u32 header_len |
//! JSON header | f64 upper triangles`, ordered layer-major, then by kind
//! (pre-RoPE keys, post-RoPE keys, values, whole-layer keys; absent kinds are
//! skipped), then by group.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{invalid, Error, FormatError, Result};
use crate::linalg::{GramAccumulator, Matrix};
use crate::model::{forward_with_probe, Checkpoint, LayerProbe, PosEncoding};

pub const GRAM_MAGIC: &[u8; 4] = b"KVGR";
pub const GRAM_VERSION: u32 = 1;

/// Which key cache statistics to collect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeVariant {
    PreRope,
    PostRope,
    Both,
}

impl RopeVariant {
    pub fn has_pre(self) -> bool {
        matches!(self, Self::PreRope | Self::Both)
    }

    pub fn has_post(self) -> bool {
        matches!(self, Self::PostRope | Self::Both)
    }
}

impl FromStr for RopeVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-rope" | "pre_rope" => Ok(Self::PreRope),
            "post-rope" | "post_rope" => Ok(Self::PostRope),
            "both" => Ok(Self::Both),
            _ => Err(invalid(format!("unknown rope variant {s:?} (pre-rope, post-rope, both)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrams {
    /// Per group, over concatenated `x W_K` head slices (dim `t·d_h`).
    pub key_pre: Option<Vec<GramAccumulator>>,
    /// Per group, the same slices after RoPE.
    pub key_post: Option<Vec<GramAccumulator>>,
    pub values: Vec<GramAccumulator>,
    /// RoPE models only: all `h` post-RoPE key heads together (dim `h·d_h`).
    pub whole_key: Option<GramAccumulator>,
}

impl LayerGrams {
    fn empty(groups: usize, group_dim: usize, full_dim: usize, variant: RopeVariant, rope: bool) -> Self {
        let grouped = || vec![GramAccumulator::new(group_dim); groups];
        Self {
            key_pre: variant.has_pre().then(grouped),
            key_post: variant.has_post().then(grouped),
            values: grouped(),
            whole_key: rope.then(|| GramAccumulator::new(full_dim)),
        }
    }

    fn accumulators(&self) -> Vec<&GramAccumulator> {
        let mut out = Vec::new();
        out.extend(self.key_pre.iter().flatten());
        out.extend(self.key_post.iter().flatten());
        out.extend(&self.values);
        out.extend(&self.whole_key);
        out
    }

    fn accumulators_mut(&mut self) -> Vec<&mut GramAccumulator> {
        let mut out = Vec::new();
        out.extend(self.key_pre.iter_mut().flatten());
        out.extend(self.key_post.iter_mut().flatten());
        out.extend(&mut self.values);
        out.extend(&mut self.whole_key);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramSet {
    /// Fingerprint of the checkpoint that produced the caches.
    pub checkpoint_hash: String,
    pub groups: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub rope_variant: RopeVariant,
    pub corpus_id: String,
    pub layers: Vec<LayerGrams>,
}

impl GramSet {
    fn empty(ckpt: &Checkpoint, hash: String, groups: usize, variant: RopeVariant, corpus_id: &str) -> Self {
        let c = &ckpt.config;
        let t = c.n_heads / groups;
        let rope = c.pos_encoding == PosEncoding::Rope;
        Self {
            checkpoint_hash: hash,
            groups,
            n_heads: c.n_heads,
            head_dim: c.head_dim,
            rope_variant: variant,
            corpus_id: corpus_id.to_string(),
            layers: (0..c.n_layers)
                .map(|_| LayerGrams::empty(groups, t * c.head_dim, c.n_heads * c.head_dim, variant, rope))
                .collect(),
        }
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.groups
    }

    pub fn group_dim(&self) -> usize {
        self.group_size() * self.head_dim
    }

    pub fn has_whole_key(&self) -> bool {
        self.layers.first().is_some_and(|l| l.whole_key.is_some())
    }

    pub fn token_count(&self) -> u64 {
        self.layers.first().map_or(0, |l| l.values[0].token_count())
    }

    /// Fails unless these statistics were collected from `ckpt`.
    pub fn check_matches(&self, ckpt: &Checkpoint) -> Result<()> {
        let hash = ckpt.fingerprint();
        if hash != self.checkpoint_hash {
            return Err(Error::Consistency(format!(
                "grams were collected from checkpoint {} but the given checkpoint is {hash}",
                self.checkpoint_hash
            )));
        }
        Ok(())
    }

    /// Adds statistics gathered over a disjoint corpus from the same model.
    pub fn merge(&mut self, other: &GramSet) -> Result<()> {
        if other.checkpoint_hash != self.checkpoint_hash {
            return Err(Error::Consistency(format!(
                "cannot merge grams from checkpoints {} and {}",
                self.checkpoint_hash, other.checkpoint_hash
            )));
        }
        if other.groups != self.groups
            || other.rope_variant != self.rope_variant
            || other.layers.len() != self.layers.len()
            || other.has_whole_key() != self.has_whole_key()
        {
            return Err(Error::Consistency("cannot merge grams with different layouts".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.accumulators_mut().into_iter().zip(b.accumulators()) {
                x.merge(y)?;
            }
        }
        if self.corpus_id.is_empty() {
            self.corpus_id = other.corpus_id.clone();
        } else if !other.corpus_id.is_empty() {
            self.corpus_id = format!("{}+{}", self.corpus_id, other.corpus_id);
        }
        Ok(())
    }

    fn accumulate_probe(&mut self, p: &LayerProbe<'_>) -> Result<()> {
        let gd = self.group_dim();
        let groups = self.groups;
        let layer = &mut self.layers[p.layer];
        for g in 0..groups {
            let cols = g * gd..(g + 1) * gd;
            if let Some(acc) = &mut layer.key_pre {
                acc[g].accumulate(&p.keys_pre_rope.columns(cols.clone()))?;
            }
            if let Some(acc) = &mut layer.key_post {
                acc[g].accumulate(&p.keys_post_rope.columns(cols.clone()))?;
            }
            layer.values[g].accumulate(&p.values.columns(cols))?;
        }
        if let Some(acc) = &mut layer.whole_key {
            acc.accumulate(p.keys_post_rope)?;
        }
        Ok(())
    }
}

/// Streams every chunk of `corpus` (at most `seq_len` tokens each) through
/// `ckpt` and accumulates Gram matrices of its caches, grouped into `groups`
/// blocks of `h / groups` consecutive heads.
pub fn collect_grams(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    groups: usize,
    variant: RopeVariant,
    seq_len: usize,
) -> Result<GramSet> {
    let c = &ckpt.config;
    if groups == 0 || c.n_heads % groups != 0 {
        return Err(invalid(format!("groups must divide heads ({groups} does not divide {})", c.n_heads)));
    }
    if !c.is_mha() {
        return Err(invalid("calibration needs a multi-head-attention source checkpoint"));
    }
    if corpus.is_empty() {
        return Err(invalid("calibration corpus is empty"));
    }
    if seq_len == 0 {
        return Err(invalid("seq_len must be positive"));
    }
    let hash = ckpt.fingerprint();
    let chunks = corpus.chunks(seq_len.min(c.max_seq_len), 1);
    let run = |acc: &mut GramSet, seq: &[u32]| -> Result<()> {
        let mut err = Ok(());
        forward_with_probe(ckpt, seq, &mut |p| {
            if err.is_ok() {
                err = acc.accumulate_probe(p);
            }
        })?;
        err
    };
    let fresh = || GramSet::empty(ckpt, hash.clone(), groups, variant, "");

    #[cfg(feature = "parallel")]
    let mut total = {
        use rayon::prelude::*;
        chunks
            .par_iter()
            .try_fold(fresh, |mut acc, seq| run(&mut acc, seq).map(|_| acc))
            .try_reduce(fresh, |mut a, b| a.merge(&b).map(|_| a))?
    };
    #[cfg(not(feature = "parallel"))]
    let mut total = {
        let mut acc = fresh();
        for seq in &chunks {
            run(&mut acc, seq)?;
        }
        acc
    };
    total.corpus_id = corpus.id.clone();
    Ok(total)
}

#[derive(Serialize, Deserialize)]
struct GramHeader {
    checkpoint_hash: String,
    groups: usize,
    n_heads: usize,
    head_dim: usize,
    n_layers: usize,
    rope_variant: RopeVariant,
    corpus_id: String,
    token_count: u64,
    group_dim: usize,
    whole_key_dim: Option<usize>,
}

pub fn write_grams(gs: &GramSet) -> Vec<u8> {
    let header = GramHeader {
        checkpoint_hash: gs.checkpoint_hash.clone(),
        groups: gs.groups,
        n_heads: gs.n_heads,
        head_dim: gs.head_dim,
        n_layers: gs.layers.len(),
        rope_variant: gs.rope_variant,
        corpus_id: gs.corpus_id.clone(),
        token_count: gs.token_count(),
        group_dim: gs.group_dim(),
        whole_key_dim: gs.has_whole_key().then(|| gs.n_heads * gs.head_dim),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(GRAM_MAGIC);
    out.extend_from_slice(&GRAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for layer in &gs.layers {
        for acc in layer.accumulators() {
            for x in acc.upper_triangle() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn read_grams(bytes: &[u8]) -> Result<GramSet> {
    let (header, payload) = crate::model::io_preamble(bytes, GRAM_MAGIC, GRAM_VERSION)?;
    let h: GramHeader = serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;
    if h.groups == 0 || h.n_heads % h.groups != 0 || h.group_dim != h.n_heads / h.groups * h.head_dim {
        return Err(FormatError::Header("inconsistent group layout".into()).into());
    }
    let mut cursor = 0usize;
    let mut read = |dim: usize| -> Result<GramAccumulator> {
        let n = dim * (dim + 1) / 2;
        let end = cursor + n * 8;
        if end > payload.len() {
            return Err(FormatError::Truncated {
                expected: bytes.len() - payload.len() + end,
                actual: bytes.len(),
            }
            .into());
        }
        let tri: Vec<f64> = payload[cursor..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        GramAccumulator::from_upper_triangle(dim, &tri, h.token_count)
    };
    let mut layers = Vec::with_capacity(h.n_layers);
    for _ in 0..h.n_layers {
        let mut grouped = |on: bool| -> Result<Option<Vec<GramAccumulator>>> {
            if !on {
                return Ok(None);
            }
            (0..h.groups).map(|_| read(h.group_dim)).collect::<Result<Vec<_>>>().map(Some)
        };
        let key_pre = grouped(h.rope_variant.has_pre())?;
        let key_post = grouped(h.rope_variant.has_post())?;
        let values = grouped(true)?.expect("values always present");
        let whole_key = h.whole_key_dim.map(&mut read).transpose()?;
        layers.push(LayerGrams { key_pre, key_post, values, whole_key });
    }
    if cursor != payload.len() {
        return Err(FormatError::Shape(format!(
            "{} trailing bytes after Gram payload",
            payload.len() - cursor
        ))
        .into());
    }
    Ok(GramSet {
        checkpoint_hash: h.checkpoint_hash,
        groups: h.groups,
        n_heads: h.n_heads,
        head_dim: h.head_dim,
        rope_variant: h.rope_variant,
        corpus_id: h.corpus_id,
        layers,
    })
}

pub fn save_grams(gs: &GramSet, path: &Path) -> Result<()> {
    std::fs::write(path, write_grams(gs))?;
    Ok(())
}

pub fn load_grams(path: &Path) -> Result<GramSet> {
    read_grams(&std::fs::read(path)?)
}

/// Minimum eigenvalue check used before decomposing: `λ_min ≥ -1e-8·trace`.
pub fn check_psd(gram: &Matrix, min_eigenvalue: f64) -> Result<()> {
    let tr = gram.trace();
    if min_eigenvalue < -1e-8 * tr.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::Numerical(format!(
            "Gram matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e}, trace {tr:.3e})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(pos: PosEncoding) -> Checkpoint {
        Checkpoint::init(ModelConfig::tiny(16, 4, 2, pos), 8).unwrap()
    }

    #[test]
    fn counts_tokens() {
        let ck = model(PosEncoding::Alibi);
        let corpus = Corpus::synthetic(2, 40);
        let gs = collect_grams(&ck, &corpus, 2, RopeVariant::PreRope, 64).unwrap();
        for l in &gs.layers {
            for a in l.accumulators() {
                assert_eq!(a.token_count(), 40);
            }
        }
        assert!(!gs.has_whole_key());
        assert!(gs.layers[0].key_post.is_none());
    }

    #[test]
    fn rejects_bad_groups_and_empty_corpus() {
        let ck = model(PosEncoding::Alibi);
        let corpus = Corpus::synthetic(2, 40);
        assert!(collect_grams(&ck, &corpus, 3, RopeVariant::PreRope, 64).is_err());
        let empty = Corpus::from_bytes("e", b"");
        assert!(collect_grams(&ck, &empty, 2, RopeVariant::PreRope, 64).is_err());
    }

    #[test]
    fn file_round_trip_and_errors() {
        let ck = model(PosEncoding::Rope);
        let corpus = Corpus::synthetic(3, 80);
        let gs = collect_grams(&ck, &corpus, 2, RopeVariant::Both, 32).unwrap();
        assert!(gs.has_whole_key());
        let bytes = write_grams(&gs);
        let back = read_grams(&bytes).unwrap();
        assert_eq!(back, gs);

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(read_grams(&bad), Err(Error::Format(FormatError::Version { found: 7, .. }))));
        assert!(matches!(
            read_grams(&bytes[..bytes.len() - 3]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn mismatched_checkpoint_names_both_hashes() {
        let ck = model(PosEncoding::Alibi);
        let other = Checkpoint::init(ck.config.clone(), 99).unwrap();
        let gs = collect_grams(&ck, &Corpus::synthetic(1, 30), 4, RopeVariant::PreRope, 30).unwrap();
        let err = gs.check_matches(&other).unwrap_err().to_string();
        assert!(err.contains(&ck.fingerprint()) && err.contains(&other.fingerprint()), "{err}");
        gs.check_matches(&ck).unwrap();
    }
}
