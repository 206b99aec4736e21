//! Checkpoint file format (little-endian):
//!
//! ```text
//! "KVHC" | u32 version = 1 | u32 header_len | JSON header | f32 payloads
//! ```
//!
//! The header carries the model config and a tensor directory
//! (`name`, `shape`, `dtype = "f32"`, byte `offset` into the payload area);
//! payloads are row-major and laid out in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::linalg::Matrix;

use super::{expected_shape, AttentionKind, Checkpoint, LayerWeights, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KVHC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

pub(crate) fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let tensors = ckpt.named_tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows(), t.cols()],
            dtype: "f32".into(),
            offset,
        });
        offset += t.rows() * t.cols() * 4;
    }
    let header = serde_json::to_vec(&Header { config: ckpt.config.clone(), tensors: entries })
        .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    to_bytes(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    std::fs::write(path, to_bytes(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}

pub(crate) fn read_preamble<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 {
        return Err(FormatError::Truncated { expected: 12, actual: bytes.len() }.into());
    }
    if &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        }
        .into());
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(FormatError::Version { expected: version, found }.into());
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + header_len {
        return Err(FormatError::Truncated { expected: 12 + header_len, actual: bytes.len() }.into());
    }
    Ok((&bytes[12..12 + header_len], &bytes[12 + header_len..]))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = read_preamble(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let payload_start = bytes.len() - payload.len();
    let header: Header =
        serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;
    let config = header.config;
    config.validate().map_err(|e| FormatError::Header(format!("invalid config: {e}")))?;

    let mut tensors = std::collections::HashMap::new();
    for entry in header.tensors {
        if entry.dtype != "f32" {
            return Err(FormatError::Header(format!("tensor {} has dtype {}", entry.name, entry.dtype)).into());
        }
        let want = expected_shape(&config, &entry.name)
            .ok_or_else(|| FormatError::Shape(format!("unexpected tensor {}", entry.name)))?;
        let shape = (entry.shape[0], entry.shape[1]);
        if shape != want {
            return Err(FormatError::Shape(format!(
                "tensor {} has shape {shape:?}, config implies {want:?}",
                entry.name
            ))
            .into());
        }
        let nbytes = shape.0 * shape.1 * 4;
        let end = entry.offset + nbytes;
        if end > payload.len() {
            return Err(FormatError::Truncated { expected: payload_start + end, actual: bytes.len() }.into());
        }
        let data = payload[entry.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.insert(entry.name, Matrix::from_vec(shape.0, shape.1, data)?);
    }

    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::from(FormatError::Shape(format!("missing tensor {name}"))))
    };
    let embedding = take("embedding".into())?;
    let final_norm = take("final_norm".into())?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let key_proj = match config.attention_kind {
            AttentionKind::ProjectedKey => Some(take(format!("layer{i}.key_proj"))?),
            AttentionKind::Standard => None,
        };
        layers.push(LayerWeights {
            attn_norm: take(format!("layer{i}.attn_norm"))?,
            wq: take(format!("layer{i}.wq"))?,
            wk: take(format!("layer{i}.wk"))?,
            wv: take(format!("layer{i}.wv"))?,
            wo: take(format!("layer{i}.wo"))?,
            key_proj,
            mlp_norm: take(format!("layer{i}.mlp_norm"))?,
            w1: take(format!("layer{i}.w1"))?,
            w2: take(format!("layer{i}.w2"))?,
        });
    }
    let ckpt = Checkpoint { config, embedding, layers, final_norm };
    ckpt.validate().map_err(|e| FormatError::Shape(e.to_string()))?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PosEncoding;

    fn sample() -> Checkpoint {
        Checkpoint::init(ModelConfig::tiny(16, 4, 2, PosEncoding::Alibi), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = to_bytes(&ck);
        let back = read_checkpoint(&bytes).unwrap();
        for ((n1, a), (n2, b)) in ck.named_tensors().iter().zip(back.named_tensors()) {
            assert_eq!(n1, &n2);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn bad_magic_named() {
        let mut bytes = to_bytes(&sample());
        bytes[..4].copy_from_slice(b"NOPE");
        let err = read_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::BadMagic { .. })));
        assert!(err.to_string().contains("KVHC"));
        assert!(err.to_string().contains("NOPE"));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = to_bytes(&sample());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(Error::Format(FormatError::Version { expected: 1, found: 2 }))
        ));
    }

    #[test]
    fn truncation_reports_counts() {
        let bytes = to_bytes(&sample());
        let cut = &bytes[..bytes.len() - 10];
        match read_checkpoint(cut) {
            Err(Error::Format(FormatError::Truncated { expected, actual })) => {
                assert_eq!(actual, bytes.len() - 10);
                assert_eq!(expected, bytes.len());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            read_checkpoint(&bytes[..7]),
            Err(Error::Format(FormatError::Truncated { expected: 12, actual: 7 }))
        ));
    }

    #[test]
    fn shape_inconsistency() {
        let mut ck = sample();
        ck.layers[0].w1 = Matrix::zeros(16, 5);
        // Bypass save-time validation to produce an inconsistent file.
        let bytes = to_bytes(&ck);
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Format(FormatError::Shape(_)))));
    }
}
