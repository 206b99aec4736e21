//! Perplexity, decode throughput, and KV-cache memory accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::model::{decode_step, extend, Checkpoint, KVCache, ModelConfig};
use crate::train::sequence_nll;

/// `exp` of the mean next-token NLL over non-overlapping windows of
/// `seq_len` tokens. Each window predicts its own tokens `1..`; PAD targets
/// are skipped.
pub fn perplexity(ckpt: &Checkpoint, corpus: &Corpus, seq_len: usize) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(invalid("perplexity needs a corpus of at least two tokens"));
    }
    if seq_len < 2 {
        return Err(invalid("seq_len must be at least 2"));
    }
    let windows = corpus.chunks(seq_len.min(ckpt.config.max_seq_len), 2);
    let score = |w: &&[u32]| -> Result<(f64, usize)> {
        let (logits, _) = crate::model::forward(ckpt, &w[..w.len() - 1])?;
        Ok(sequence_nll(&logits, &w[1..]))
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(f64, usize)>> = {
        use rayon::prelude::*;
        windows.par_iter().map(score).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(f64, usize)>> = windows.iter().map(score).collect();

    let (mut total, mut count) = (0.0, 0usize);
    for p in parts {
        let (nll, n) = p?;
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(invalid("corpus has no non-PAD targets"));
    }
    let ppl = (total / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numerical(format!("perplexity is not finite (mean nll {})", total / count as f64)));
    }
    Ok(ppl)
}

/// `2 · L · g · d_h · seq_len · bytes_per_element`.
pub fn kv_memory_bytes(config: &ModelConfig, seq_len: usize, bytes_per_element: usize) -> usize {
    2 * config.n_layers * config.kv_width() * seq_len * bytes_per_element
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub checkpoint: String,
    pub context_len: usize,
    pub gen_tokens: usize,
    pub repeats: usize,
    /// Absent when `gen_tokens` is 0.
    pub decode_tokens_per_s: Option<f64>,
    pub prefill_s: f64,
    /// Live cache bytes after the last decode step.
    pub kv_bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ppl: Option<f64>,
    /// Greedy continuation of the synthetic prompt.
    #[serde(skip)]
    pub generated: Vec<u32>,
}

/// Deterministic prompt for benchmarking.
pub fn bench_prompt(context_len: usize) -> Vec<u32> {
    let mut toks = Corpus::synthetic(0x6265_6e63, context_len + 16).tokens;
    toks.truncate(context_len);
    toks
}

struct Run {
    prefill_s: f64,
    decode_s: f64,
    kv_bytes: usize,
    generated: Vec<u32>,
}

fn run_once(ckpt: &Checkpoint, prompt: &[u32], gen_tokens: usize) -> Result<Run> {
    let c = &ckpt.config;
    let mut cache = KVCache::new(c);
    let t0 = Instant::now();
    let logits = extend(ckpt, &mut cache, prompt)?;
    let prefill_s = t0.elapsed().as_secs_f64();
    let mut next = crate::model::argmax(logits.row(logits.rows() - 1));
    let mut generated = Vec::with_capacity(gen_tokens);
    let t1 = Instant::now();
    for _ in 0..gen_tokens {
        generated.push(next);
        let l = decode_step(ckpt, &mut cache, next)?;
        let expected = kv_memory_bytes(c, cache.len(), 4);
        if cache.live_bytes() != expected {
            return Err(Error::Consistency(format!(
                "cache holds {} bytes at length {}, expected {expected}",
                cache.live_bytes(),
                cache.len()
            )));
        }
        next = crate::model::argmax(l.row(0));
    }
    let decode_s = t1.elapsed().as_secs_f64();
    Ok(Run { prefill_s, decode_s, kv_bytes: cache.live_bytes(), generated })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Prefills `context_len` prompt tokens, then greedily decodes `gen_tokens`.
/// One warmup run is discarded; timings are medians over `repeats` runs.
pub fn throughput_bench(ckpt: &Checkpoint, context_len: usize, gen_tokens: usize, repeats: usize) -> Result<BenchResult> {
    let c = &ckpt.config;
    if context_len == 0 {
        return Err(invalid("context length must be positive"));
    }
    if repeats == 0 {
        return Err(invalid("repeats must be positive"));
    }
    if context_len + gen_tokens > c.max_seq_len {
        return Err(invalid(format!(
            "context {context_len} + {gen_tokens} generated tokens exceeds max_seq_len {}",
            c.max_seq_len
        )));
    }
    let prompt = bench_prompt(context_len);
    let warm = run_once(ckpt, &prompt, gen_tokens.min(4))?;
    log::debug!("warmup prefill {:.3}s", warm.prefill_s);
    let mut prefill = Vec::with_capacity(repeats);
    let mut decode = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let r = run_once(ckpt, &prompt, gen_tokens)?;
        prefill.push(r.prefill_s);
        decode.push(r.decode_s);
        last = Some(r);
    }
    let last = last.expect("repeats > 0");
    let decode_s = median(decode);
    Ok(BenchResult {
        checkpoint: ckpt.fingerprint(),
        context_len,
        gen_tokens,
        repeats,
        decode_tokens_per_s: (gen_tokens > 0).then(|| gen_tokens as f64 / decode_s.max(1e-12)),
        prefill_s: median(prefill),
        kv_bytes: last.kv_bytes,
        ppl: None,
        generated: last.generated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PosEncoding;

    #[test]
    fn memory_arithmetic() {
        let c = ModelConfig::default();
        assert_eq!(kv_memory_bytes(&c, 128, 4), 262_144);
        let mut half = c.clone();
        half.n_kv_heads = 4;
        assert_eq!(kv_memory_bytes(&half, 128, 4) * 2, kv_memory_bytes(&c, 128, 4));
        assert_eq!(kv_memory_bytes(&c, 0, 4), 0);
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let mut ck = Checkpoint::init(ModelConfig::tiny(16, 2, 1, PosEncoding::Alibi), 1).unwrap();
        for m in ck.embedding.data_mut() {
            *m = 0.0;
        }
        let corpus = Corpus::synthetic(3, 300);
        let ppl = perplexity(&ck, &corpus, 64).unwrap();
        assert!((ppl / 259.0 - 1.0).abs() < 1e-3, "{ppl}");
    }

    #[test]
    fn short_corpus_is_one_window() {
        let ck = Checkpoint::init(ModelConfig::tiny(16, 2, 1, PosEncoding::Rope), 2).unwrap();
        let corpus = Corpus::synthetic(5, 40);
        assert_eq!(perplexity(&ck, &corpus, 64).unwrap(), perplexity(&ck, &corpus, 41).unwrap());
        assert!(perplexity(&ck, &Corpus::from_bytes("e", b""), 8).is_err());
    }

    #[test]
    fn bench_schema_and_edges() {
        let ck = Checkpoint::init(ModelConfig::tiny(16, 2, 1, PosEncoding::Alibi), 3).unwrap();
        let r = throughput_bench(&ck, 32, 0, 1).unwrap();
        assert!(r.decode_tokens_per_s.is_none());
        assert!(r.prefill_s > 0.0);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["decode_tokens_per_s"].is_null());
        assert!(json.get("ppl").is_none());

        let a = throughput_bench(&ck, 32, 8, 1).unwrap();
        let b = throughput_bench(&ck, 32, 8, 3).unwrap();
        assert_eq!(a.generated, b.generated);
        assert_eq!(a.kv_bytes, kv_memory_bytes(&ck.config, 40, 4));
        assert!(throughput_bench(&ck, 250, 10, 1).is_err());
    }
}
