//! Minimal decoder-only transformer: pre-norm residual blocks with RMS-norm,
//! multi-/grouped-query attention (optionally with a projected key cache),
//! ALiBi or RoPE positions, a GELU MLP and tied input/output embeddings.
//!
//! Weights are held as `f64` matrices whose entries are always exactly
//! representable in `f32` (the storage precision); all arithmetic runs in
//! `f64`.

mod attention;
mod cache;
mod forward;
mod io;
pub mod ops;

pub use attention::{alibi_bias, alibi_slope, apply_rope, apply_rope_inverse, attention_scores, softmax_in_place};
pub use cache::KVCache;
pub use forward::{decode_step, extend, extend_with_probe, forward, forward_with_probe, greedy_generate, LayerProbe};
pub(crate) use io::read_preamble as io_preamble;
pub(crate) use forward::argmax;
pub use io::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::VOCAB_SIZE;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    None,
    Alibi,
    Rope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Keys cached as `x W_K` (post-RoPE when RoPE is on), one head per group.
    Standard,
    /// Keys cached as `RoPE(x W_K) · key_projᵀ`, a `g·d_h`-wide row per token;
    /// queries are mapped through `key_proj` at score time.
    ProjectedKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub pos_encoding: PosEncoding,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_attention_kind")]
    pub attention_kind: AttentionKind,
}

fn default_rope_theta() -> f64 {
    10000.0
}

fn default_attention_kind() -> AttentionKind {
    AttentionKind::Standard
}

impl Default for ModelConfig {
    /// The desk-scale MHA model: 4 layers, d=64, 8 heads of width 8, ALiBi.
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_heads: 8,
            n_kv_heads: 8,
            head_dim: 8,
            n_layers: 4,
            d_ff: 256,
            max_seq_len: 4096,
            pos_encoding: PosEncoding::Alibi,
            rope_theta: default_rope_theta(),
            attention_kind: AttentionKind::Standard,
        }
    }
}

impl ModelConfig {
    /// Small MHA config with the given width; `head_dim` is fixed at 4 or 8.
    pub fn tiny(d_model: usize, n_heads: usize, n_layers: usize, pos_encoding: PosEncoding) -> Self {
        Self {
            d_model,
            n_heads,
            n_kv_heads: n_heads,
            head_dim: d_model / n_heads,
            n_layers,
            d_ff: 2 * d_model,
            max_seq_len: 256,
            pos_encoding,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(invalid(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(invalid(format!(
                "n_kv_heads {} must divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        if self.pos_encoding == PosEncoding::Rope && self.head_dim % 2 != 0 {
            return Err(invalid("RoPE needs an even head_dim"));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(invalid("rope_theta must be positive"));
        }
        if self.attention_kind == AttentionKind::ProjectedKey && self.pos_encoding != PosEncoding::Rope {
            return Err(invalid("projected_key attention is only defined for RoPE models"));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Width of a cached K (or V) row: `g · d_h`.
    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Output width of `W_K`: the full `h · d_h` in projected-key mode.
    pub fn key_width(&self) -> usize {
        match self.attention_kind {
            AttentionKind::Standard => self.kv_width(),
            AttentionKind::ProjectedKey => self.n_heads * self.head_dim,
        }
    }

    pub fn is_mha(&self) -> bool {
        self.n_kv_heads == self.n_heads && self.attention_kind == AttentionKind::Standard
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// `(g·d_h) x (h·d_h)` orthonormal rows; present iff projected-key.
    pub key_proj: Option<Matrix>,
    pub mlp_norm: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// `vocab x d`, also the output head.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Matrix,
}

impl Checkpoint {
    /// Random initialization (f32-rounded). Only standard attention.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.attention_kind != AttentionKind::Standard {
            return Err(invalid("random init only supports standard attention"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let embedding = Matrix::random_normal(config.vocab_size, d, 0.05, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(d),
                wq: Matrix::random_normal(d, d, proj_std, &mut rng),
                wk: Matrix::random_normal(d, config.kv_width(), proj_std, &mut rng),
                wv: Matrix::random_normal(d, config.kv_width(), proj_std, &mut rng),
                wo: Matrix::random_normal(d, d, proj_std * out_scale, &mut rng),
                key_proj: None,
                mlp_norm: ones(d),
                w1: Matrix::random_normal(d, config.d_ff, proj_std, &mut rng),
                w2: Matrix::random_normal(config.d_ff, d, out_scale / (config.d_ff as f64).sqrt(), &mut rng),
            })
            .collect();
        let mut ckpt = Self { config, embedding, layers, final_norm: ones(d) };
        ckpt.round_to_f32();
        Ok(ckpt)
    }

    /// Shapes, finiteness and key-projection orthonormality.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.n_layers {
            return Err(Error::Consistency(format!(
                "checkpoint has {} layers, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (name, t) in self.named_tensors() {
            let want = expected_shape(c, &name)
                .ok_or_else(|| Error::Consistency(format!("unexpected tensor {name}")))?;
            if t.shape() != want {
                return Err(Error::Consistency(format!(
                    "tensor {name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Consistency(format!("tensor {name} has non-finite entries")));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            match (&l.key_proj, c.attention_kind) {
                (None, AttentionKind::Standard) => {}
                (Some(p), AttentionKind::ProjectedKey) => {
                    let defect = p.matmul_t(p)?.max_abs_diff(&Matrix::identity(p.rows()));
                    if defect > 1e-6 {
                        return Err(Error::Consistency(format!(
                            "layer{i}.key_proj rows are not orthonormal (defect {defect:.2e})"
                        )));
                    }
                }
                (None, AttentionKind::ProjectedKey) => {
                    return Err(Error::Consistency(format!("layer{i}.key_proj missing for projected_key model")))
                }
                (Some(_), AttentionKind::Standard) => {
                    return Err(Error::Consistency(format!("layer{i}.key_proj present on standard model")))
                }
            }
        }
        Ok(())
    }

    /// Every tensor in storage (directory) order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            if let Some(p) = &l.key_proj {
                out.push((format!("layer{i}.key_proj"), p));
            }
            out.push((format!("layer{i}.mlp_norm"), &l.mlp_norm));
            out.push((format!("layer{i}.w1"), &l.w1));
            out.push((format!("layer{i}.w2"), &l.w2));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    /// Trainable tensors in storage order; `key_proj` is never trainable.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layer{i}.wq"), &mut l.wq));
            out.push((format!("layer{i}.wk"), &mut l.wk));
            out.push((format!("layer{i}.wv"), &mut l.wv));
            out.push((format!("layer{i}.wo"), &mut l.wo));
            out.push((format!("layer{i}.mlp_norm"), &mut l.mlp_norm));
            out.push((format!("layer{i}.w1"), &mut l.w1));
            out.push((format!("layer{i}.w2"), &mut l.w2));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out
    }

    pub fn round_to_f32(&mut self) {
        self.embedding.round_to_f32();
        self.final_norm.round_to_f32();
        for l in &mut self.layers {
            for m in [
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w1,
                &mut l.w2,
            ] {
                m.round_to_f32();
            }
            if let Some(p) = &mut l.key_proj {
                p.round_to_f32();
            }
        }
    }

    /// A zero-filled checkpoint with the same tensor shapes (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            config: self.config.clone(),
            embedding: z(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: z(&l.attn_norm),
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    key_proj: l.key_proj.clone(),
                    mlp_norm: z(&l.mlp_norm),
                    w1: z(&l.w1),
                    w2: z(&l.w2),
                })
                .collect(),
            final_norm: z(&self.final_norm),
        }
    }

    /// Short content digest over the serialized checkpoint. Derived artifacts
    /// (Gram files, reports) record it so stale inputs are caught.
    pub fn fingerprint(&self) -> String {
        let bytes = io::to_bytes(self);
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.rows() * t.cols()).sum()
    }
}

fn ones(d: usize) -> Matrix {
    Matrix::from_vec(1, d, vec![1.0; d]).expect("shape")
}

pub(crate) fn expected_shape(c: &ModelConfig, name: &str) -> Option<(usize, usize)> {
    let d = c.d_model;
    match name {
        "embedding" => return Some((c.vocab_size, d)),
        "final_norm" => return Some((1, d)),
        _ => {}
    }
    let rest = name.strip_prefix("layer")?;
    let (idx, field) = rest.split_once('.')?;
    let idx: usize = idx.parse().ok()?;
    if idx >= c.n_layers {
        return None;
    }
    Some(match field {
        "attn_norm" | "mlp_norm" => (1, d),
        "wq" | "wo" => (d, d),
        "wk" => (d, c.key_width()),
        "wv" => (d, c.kv_width()),
        "key_proj" if c.attention_kind == AttentionKind::ProjectedKey => (c.kv_width(), c.n_heads * c.head_dim),
        "w1" => (d, c.d_ff),
        "w2" => (c.d_ff, d),
        _ => return None,
    })
}
