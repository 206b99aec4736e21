//! Toy-scale decoder-only transformer with exact KV caching, plus a toolkit
//! that turns multi-head-attention checkpoints into grouped-query-attention
//! checkpoints by low-rank decomposition of their KV caches.
//!
//! Pipeline: [`train`] a byte-level MHA model, [`calibration`] collects
//! streaming Gram matrices of its key/value caches, [`compress`] derives
//! orthonormal projections and fuses them into the weights, [`eval`]
//! measures perplexity, throughput and cache memory, and [`analysis`] emits
//! the low-rank diagnostics.

pub mod analysis;
pub mod calibration;
#[cfg(feature = "cli")]
pub mod cli;
pub mod compress;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use linalg::{EigenDecomposition, GramAccumulator, Matrix, Projection};
pub use model::{AttentionKind, Checkpoint, KVCache, LayerWeights, ModelConfig, PosEncoding};
