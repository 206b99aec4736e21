//! Train a toy model, compress it at g = h/2 with each strategy, fine-tune
//! the svd-a result, and print perplexities.
//!
//! cargo run --release --example pipeline -- [pretrain_steps] [finetune_steps]

use std::time::Instant;

use kvshrink::calibration::{collect_grams, RopeVariant};
use kvshrink::compress::{compress, CompressionPlan, KeyGrouping, Strategy};
use kvshrink::corpus::Corpus;
use kvshrink::eval::perplexity;
use kvshrink::train::{train, TrainConfig};
use kvshrink::{Checkpoint, ModelConfig};

fn main() -> kvshrink::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let pre_steps = args.first().copied().unwrap_or(600);
    let ft_steps = args.get(1).copied().unwrap_or(1000);

    let corpus = Corpus::synthetic(0, 400_000);
    let (train_set, rest) = corpus.split(0.8)?;
    let (calib, heldout) = rest.split(0.5)?;

    let t = Instant::now();
    let base = Checkpoint::init(ModelConfig::default(), 0)?;
    let cfg = TrainConfig { steps: pre_steps, ..TrainConfig::pretrain() };
    let base = train(&base, &train_set, &cfg, &mut |l| {
        if l.step % 100 == 0 {
            eprintln!("pretrain {:>5} loss {:.4}", l.step, l.loss);
        }
    })?;
    eprintln!("pretrain {pre_steps} steps in {:.1}s", t.elapsed().as_secs_f64());
    let base_ppl = perplexity(&base, &heldout, 128)?;
    println!("baseline        ppl {base_ppl:.4}");

    let g = base.config.n_heads / 2;
    let grams = collect_grams(&base, &calib, g, RopeVariant::Both, 128)?;
    let mut svd_a = None;
    for s in [Strategy::MeanPool, Strategy::SvdW, Strategy::SvdA] {
        let plan = CompressionPlan::new(s, g, None, KeyGrouping::Whole, &base)?;
        let out = compress(&base, Some(&grams), &plan)?;
        println!("{:<15} ppl {:.4}", s.to_string(), perplexity(&out, &heldout, 128)?);
        if s == Strategy::SvdA {
            svd_a = Some(out);
        }
    }
    let svd_a = svd_a.expect("svd-a ran");
    let t = Instant::now();
    let cfg = TrainConfig { steps: ft_steps, seed: 1, ..TrainConfig::finetune() };
    let tuned = train(&svd_a, &train_set, &cfg, &mut |l| {
        if l.step % 100 == 0 {
            eprintln!("finetune {:>5} loss {:.4}", l.step, l.loss);
        }
    })?;
    eprintln!("finetune {ft_steps} steps in {:.1}s", t.elapsed().as_secs_f64());
    println!("svd-a tuned     ppl {:.4}", perplexity(&tuned, &heldout, 128)?);
    Ok(())
}
