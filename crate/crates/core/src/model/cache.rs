use crate::error::{Error, Result};

use super::ModelConfig;

/// Per-layer key/value rows appended token by token, stored as `f32`.
///
/// Every layer holds `len` rows of width `kv_width` for both keys and values
/// (in projected-key mode the key rows are the compressed `g·d_h` projections).
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    width: usize,
    len: usize,
    capacity: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            width: config.kv_width(),
            len: 0,
            capacity: config.max_seq_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    /// Bytes of cached state currently held (keys plus values, all layers).
    pub fn live_bytes(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(|v| std::mem::size_of_val(v.as_slice()))
            .sum()
    }

    pub(crate) fn check_room(&self, extra: usize) -> Result<()> {
        if self.len + extra > self.capacity {
            return Err(Error::Capacity(format!(
                "KV cache holds {} of {} positions; cannot append {extra}",
                self.len, self.capacity
            )));
        }
        Ok(())
    }

    /// Appends `rows` rows to one layer. Callers extend every layer by the
    /// same amount and then call [`commit`](Self::commit).
    pub(crate) fn push_layer(&mut self, layer: usize, keys: &[f64], values: &[f64]) {
        debug_assert_eq!(keys.len(), values.len());
        debug_assert_eq!(keys.len() % self.width, 0);
        self.keys[layer].extend(keys.iter().map(|&x| x as f32));
        self.values[layer].extend(values.iter().map(|&x| x as f32));
    }

    pub(crate) fn commit(&mut self, rows: usize) {
        self.len += rows;
        debug_assert!(self.keys.iter().all(|k| k.len() == self.len * self.width));
    }
}
