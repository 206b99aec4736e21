//! Next-token training for the toy model: cross-entropy, hand-derived
//! gradients, AdamW with decoupled weight decay, global-norm clipping and a
//! constant learning rate.

mod backprop;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::model::Checkpoint;

pub(crate) use backprop::{forward_tape, sequence_nll};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-5,
            batch_size: 8,
            seq_len: 64,
            steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate rescaled for training a desk-scale model from scratch.
    pub fn pretrain() -> Self {
        Self { learning_rate: 3e-3, ..Self::default() }
    }

    /// Learning rate rescaled for recovering a compressed desk-scale model.
    pub fn finetune() -> Self {
        Self { learning_rate: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(invalid("batch_size and seq_len must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("adam betas must lie in [0,1)"));
        }
        if self.weight_decay < 0.0 || self.grad_clip <= 0.0 || self.adam_eps <= 0.0 {
            return Err(invalid("weight_decay >= 0, grad_clip > 0 and adam_eps > 0 required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean next-token cross-entropy over the batch (PAD targets excluded) and
/// its gradient for every trainable tensor. Each sequence supplies inputs
/// `seq[..n-1]` and targets `seq[1..]`. The returned gradient checkpoint has
/// the same layout as `ckpt`; its `key_proj` entries are copies, not
/// gradients.
pub fn loss_and_grads(ckpt: &Checkpoint, batch: &[Vec<u32>]) -> Result<(f64, Checkpoint)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if batch.iter().any(|s| s.len() < 2) {
        return Err(invalid("every sequence needs at least two tokens"));
    }
    let total_targets: usize = batch
        .iter()
        .map(|s| s[1..].iter().filter(|&&t| t != crate::corpus::PAD).count())
        .sum();
    if total_targets == 0 {
        return Err(invalid("batch has no non-PAD targets"));
    }
    let weight = 1.0 / total_targets as f64;
    let per_seq = |seq: &Vec<u32>| -> Result<(f64, Checkpoint)> {
        let tape = forward_tape(ckpt, &seq[..seq.len() - 1])?;
        let (nll, _) = sequence_nll(&tape.logits, &seq[1..]);
        let mut g = ckpt.zeros_like();
        backprop::backward(ckpt, &tape, &seq[1..], weight, &mut g)?;
        Ok((nll, g))
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(f64, Checkpoint)>> = {
        use rayon::prelude::*;
        batch.par_iter().map(per_seq).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(f64, Checkpoint)>> = batch.iter().map(per_seq).collect();

    let mut loss = 0.0;
    let mut grads: Option<Checkpoint> = None;
    for part in parts {
        let (nll, g) = part?;
        loss += nll;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => add_grads(acc, &g),
        }
    }
    Ok((loss * weight, grads.expect("non-empty batch")))
}

/// Mean loss only.
pub fn loss(ckpt: &Checkpoint, batch: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for seq in batch {
        if seq.len() < 2 {
            return Err(invalid("every sequence needs at least two tokens"));
        }
        let tape = forward_tape(ckpt, &seq[..seq.len() - 1])?;
        let (nll, n) = sequence_nll(&tape.logits, &seq[1..]);
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(invalid("batch has no non-PAD targets"));
    }
    Ok(total / count as f64)
}

fn add_grads(acc: &mut Checkpoint, g: &Checkpoint) {
    let src: Vec<Matrix> = g.clone().trainable_mut().into_iter().map(|(_, m)| m.clone()).collect();
    for ((_, a), b) in acc.trainable_mut().into_iter().zip(&src) {
        a.add_assign(b);
    }
}

struct AdamW {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl AdamW {
    fn new(ckpt: &mut Checkpoint) -> Self {
        let zeros: Vec<Matrix> =
            ckpt.trainable_mut().iter().map(|(_, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut Checkpoint, grads: &mut Checkpoint, cfg: &TrainConfig) -> f64 {
        let mut gs = grads.trainable_mut();
        let norm = gs
            .iter()
            .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (idx, (name, p)) in params.trainable_mut().into_iter().enumerate() {
            // Norm gains are not decayed.
            let decay = if name.ends_with("_norm") { 0.0 } else { cfg.weight_decay };
            let g = gs[idx].1.data_mut();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
                let gi = gi * clip;
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.adam_eps);
                *pi -= cfg.learning_rate * (update + decay * *pi);
            }
            p.round_to_f32();
        }
        norm
    }
}

/// Random training windows of `seq_len + 1` tokens.
fn sample_batch(corpus: &Corpus, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let span = (cfg.seq_len + 1).min(corpus.len());
    (0..cfg.batch_size)
        .map(|_| {
            let start = rng.gen_range(0..=corpus.len() - span);
            corpus.tokens[start..start + span].to_vec()
        })
        .collect()
}

/// Trains `ckpt` on random windows of `corpus`. `on_step` sees every step's
/// log entry. Deterministic for a fixed seed.
pub fn train(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(invalid("training corpus needs at least two tokens"));
    }
    if cfg.seq_len > ckpt.config.max_seq_len {
        return Err(invalid(format!(
            "seq_len {} exceeds max_seq_len {}",
            cfg.seq_len, ckpt.config.max_seq_len
        )));
    }
    let mut params = ckpt.clone();
    if cfg.steps == 0 {
        return Ok(params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&mut params);
    for step in 0..cfg.steps {
        let batch = sample_batch(corpus, cfg, &mut rng);
        let (loss, mut grads) = loss_and_grads(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {step}")));
        }
        let grad_norm = opt.step(&mut params, &mut grads, cfg);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm at step {step}")));
        }
        on_step(&StepLog { step, loss, grad_norm });
    }
    Ok(params)
}

/// Full-parameter fine-tuning of a compressed checkpoint. `key_proj` is not a
/// trainable tensor, so projected-key cache geometry stays fixed.
pub fn finetune(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint> {
    train(ckpt, corpus, cfg, on_step)
}

/// Writes `step,loss,grad_norm` rows.
pub fn write_log_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,grad_norm")?;
    for l in logs {
        writeln!(f, "{},{:.9e},{:.9e}", l.step, l.loss, l.grad_norm)?;
    }
    f.flush()?;
    Ok(())
}
