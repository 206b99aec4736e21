//! Browser bindings: cache spectra, strategy comparison and a KV memory
//! calculator over a small randomly initialized model, calibrated on text
//! typed into the page.

use kvshrink::analysis::spectrum_report;
use kvshrink::calibration::{collect_grams, RopeVariant};
use kvshrink::compress::{compress, compression_ratio, CompressionPlan, KeyGrouping, Strategy};
use kvshrink::corpus::Corpus;
use kvshrink::eval::{kv_memory_bytes, perplexity};
use kvshrink::model::{forward, Checkpoint, ModelConfig, PosEncoding};
use serde_json::json;
use wasm_bindgen::prelude::*;

const SEQ_LEN: usize = 64;

fn demo_model(rope: bool, seed: u32) -> kvshrink::Result<Checkpoint> {
    let pos = if rope { PosEncoding::Rope } else { PosEncoding::Alibi };
    Checkpoint::init(ModelConfig::tiny(32, 8, 2, pos), u64::from(seed))
}

fn corpus(text: &str) -> kvshrink::Result<Corpus> {
    if text.len() < 2 * SEQ_LEN {
        return Err(kvshrink::Error::InvalidArgument(format!("need at least {} bytes of text", 2 * SEQ_LEN)));
    }
    Ok(Corpus::from_bytes("page", text.as_bytes()))
}

fn variant(rope: bool) -> RopeVariant {
    if rope {
        RopeVariant::Both
    } else {
        RopeVariant::PreRope
    }
}

/// Energy kept at every eighth of each cache's width, as JSON rows.
pub fn spectrum_json(text: &str, groups: usize, rope: bool, seed: u32) -> kvshrink::Result<String> {
    let ck = demo_model(rope, seed)?;
    let grams = collect_grams(&ck, &corpus(text)?, groups, variant(rope), SEQ_LEN)?;
    let fractions: Vec<f64> = (1..=8).map(|k| k as f64 / 8.0).collect();
    let rows: Vec<_> = spectrum_report(&grams, &fractions)?
        .into_iter()
        .map(|r| json!({"layer": r.layer, "kind": r.kind.to_string(), "group": r.group, "fraction": r.fraction, "energy_ratio": r.energy_ratio}))
        .collect();
    Ok(serde_json::Value::Array(rows).to_string())
}

/// Calibrates on the first half of `text`, then reports held-out perplexity
/// and logit drift of each strategy on the second half.
pub fn compare_json(text: &str, groups: usize, rope: bool, seed: u32) -> kvshrink::Result<String> {
    let ck = demo_model(rope, seed)?;
    let (calib, heldout) = corpus(text)?.split(0.5)?;
    let grams = collect_grams(&ck, &calib, groups, variant(rope), SEQ_LEN)?;
    let window = &heldout.tokens[..heldout.len().min(SEQ_LEN)];
    let (reference, _) = forward(&ck, window)?;
    let mut strategies = vec![json!({"name": "original", "ppl": perplexity(&ck, &heldout, SEQ_LEN)?, "logit_drift": 0.0})];
    for s in [Strategy::MeanPool, Strategy::SvdW, Strategy::SvdA] {
        let plan = CompressionPlan::new(s, groups, None, KeyGrouping::Whole, &ck)?;
        let out = compress(&ck, Some(&grams), &plan)?;
        let (logits, _) = forward(&out, window)?;
        let drift = logits.sub(&reference)?.frobenius_norm() / reference.frobenius_norm();
        strategies.push(json!({"name": s.to_string(), "ppl": perplexity(&out, &heldout, SEQ_LEN)?, "logit_drift": drift}));
    }
    let c = &ck.config;
    let mut compressed = c.clone();
    compressed.n_kv_heads = groups;
    Ok(json!({
        "compression_ratio": compression_ratio(c.n_heads, groups)?,
        "kv_bytes_per_token": {"original": kv_memory_bytes(c, 1, 4), "compressed": kv_memory_bytes(&compressed, 1, 4)},
        "strategies": strategies,
    })
    .to_string())
}

fn js_err(e: kvshrink::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub fn spectrum(text: &str, groups: usize, rope: bool, seed: u32) -> Result<String, JsValue> {
    spectrum_json(text, groups, rope, seed).map_err(js_err)
}

#[wasm_bindgen]
pub fn compare(text: &str, groups: usize, rope: bool, seed: u32) -> Result<String, JsValue> {
    compare_json(text, groups, rope, seed).map_err(js_err)
}

/// Bytes of an f32 KV cache: `2 · layers · kv_heads · head_dim · seq_len · 4`.
#[wasm_bindgen]
pub fn kv_memory(layers: usize, kv_heads: usize, head_dim: usize, seq_len: usize) -> f64 {
    let config = ModelConfig { n_layers: layers, n_kv_heads: kv_heads, head_dim, ..ModelConfig::default() };
    kv_memory_bytes(&config, seq_len, 4) as f64
}
