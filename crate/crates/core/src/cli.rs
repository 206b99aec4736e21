//! `kvshrink` command line: the full pipeline as subcommands.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or consistency error
//! (including unreadable or malformed files), 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::analysis::{
    cache_reconstruction_report, reconstruction_summary, spectrum_report, spectrum_summary, write_reconstruction_csv,
    write_spectrum_csv,
};
use crate::calibration::{collect_grams, load_grams, save_grams, RopeVariant};
use crate::compress::{
    compress, compression_ratio, svd_a_projections, svd_w_projections, CompressionPlan, KeyGrouping, RopeMode,
    Strategy,
};
use crate::corpus::Corpus;
use crate::error::{invalid, Error, Result};
use crate::eval::{kv_memory_bytes, perplexity, throughput_bench};
use crate::model::{greedy_generate, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, PosEncoding};
use crate::train::{train, write_log_csv, StepLog, TrainConfig};

const FORMATS: &str = "\
File formats (all little-endian):
  checkpoint (.kvhc)  \"KVHC\" | u32 version=1 | u32 header_len | JSON header
                      {config, tensors:[{name, shape, dtype:\"f32\", offset}]} |
                      f32 tensor payloads. Projected-key checkpoints carry
                      `layer{i}.key_proj` tensors.
  grams (.kvgr)       \"KVGR\" | u32 version=1 | u32 header_len | JSON header
                      {checkpoint_hash, groups, rope_variant, corpus_id, ...} |
                      f64 upper triangles, layer-major, then kind (pre-RoPE
                      keys, post-RoPE keys, values, whole-layer keys), then group.
  corpus              raw bytes; each byte is one token (vocab 259 with
                      BOS=256, EOS=257, PAD=258).
  config (--config)   JSON {\"model\": {...ModelConfig}, \"train\": {...TrainConfig}};
                      both objects and all their fields are optional.
  CSV outputs         layer,kind,group,fraction,energy_ratio
                      layer,kind,group,rel_frob_error
                      step,loss,grad_norm
  JSON records        {checkpoint, context_len, decode_tokens_per_s, prefill_s,
                      kv_bytes, ppl?}

Exit codes: 0 ok, 1 usage, 2 validation/consistency, 3 numerical.
Logging: KVSHRINK_LOG={error,warn,info,debug} (default info).";

#[derive(Parser, Debug)]
#[command(name = "kvshrink", version, about = "Compress multi-head KV caches into grouped-query attention", after_help = FORMATS)]
struct Cli {
    /// Cap the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from scratch on a byte corpus.
    #[command(after_help = FORMATS)]
    Train(TrainArgs),
    /// Collect KV-cache Gram matrices of a checkpoint over a corpus.
    #[command(after_help = FORMATS)]
    Calibrate(CalibrateArgs),
    /// Convert an MHA checkpoint into a GQA / projected-key checkpoint.
    #[command(after_help = FORMATS)]
    Compress(CompressArgs),
    /// Full-parameter fine-tuning of a (compressed) checkpoint.
    #[command(after_help = FORMATS)]
    Finetune(FinetuneArgs),
    /// Perplexity and KV-cache size of a checkpoint.
    #[command(after_help = FORMATS)]
    Eval(EvalArgs),
    /// Prefill and decode throughput at a fixed context length.
    #[command(after_help = FORMATS)]
    Bench(BenchArgs),
    /// Energy-ratio spectra and cache reconstruction errors as CSV.
    #[command(after_help = FORMATS)]
    Analyze(AnalyzeArgs),
    /// Greedy continuation of a text prompt.
    #[command(after_help = FORMATS)]
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config with optional `model` and `train` objects.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus; a synthetic corpus is generated when omitted.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Bytes of synthetic corpus when --corpus is omitted.
    #[arg(long, default_value_t = 200_000)]
    synthetic_bytes: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-step CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// JSON config; only its `train` object is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Number of KV groups the statistics are split into.
    #[arg(long)]
    groups: usize,
    /// Key statistics to keep: pre-rope, post-rope or both (default: both
    /// for RoPE models, pre-rope otherwise).
    #[arg(long)]
    rope_variant: Option<RopeVariant>,
    /// Window length used when streaming the corpus.
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// mean-pool, svd-w or svd-a.
    #[arg(long)]
    strategy: Strategy,
    /// Target number of KV heads; must divide the head count.
    #[arg(long)]
    groups: usize,
    /// Calibration grams (required for svd-a).
    #[arg(long)]
    grams: Option<PathBuf>,
    /// fused or projected-key (default: projected-key for RoPE models under
    /// svd-w/svd-a, fused otherwise).
    #[arg(long)]
    rope_mode: Option<RopeMode>,
    /// Projected-key basis: whole (one basis over all key heads) or grouped.
    #[arg(long, default_value = "whole")]
    key_grouping: KeyGrouping,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// JSON result path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Prompt length prefilled before decoding.
    #[arg(long, default_value_t = 2048)]
    context: usize,
    /// Tokens decoded after the prompt.
    #[arg(long, default_value_t = 64)]
    gen: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Optional corpus; adds `ppl` to the record.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Grams whose spectra are reported.
    #[arg(long)]
    grams: PathBuf,
    /// Retained fractions, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5")]
    fractions: Vec<f64>,
    /// Spectrum CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Source checkpoint; with --corpus enables the reconstruction report.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Held-out corpus for the reconstruction report.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// svd-a or svd-w projections for the reconstruction report.
    #[arg(long, default_value = "svd-a")]
    strategy: Strategy,
    #[arg(long)]
    rope_mode: Option<RopeMode>,
    #[arg(long, default_value = "whole")]
    key_grouping: KeyGrouping,
    /// Retained rank per group (analysis only; default head_dim).
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Reconstruction CSV path.
    #[arg(long)]
    recon_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    gen: usize,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<serde_json::Value>,
    train: Option<serde_json::Value>,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => serde_json::from_slice(&fs::read(p)?)
            .map_err(|e| invalid(format!("{}: {e}", p.display()))),
    }
}

/// Overlays the keys of `patch` onto `base`.
fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(base: T, patch: Option<&serde_json::Value>) -> Result<T> {
    let Some(patch) = patch else { return Ok(base) };
    let serde_json::Value::Object(fields) = patch else {
        return Err(invalid("config sections must be JSON objects"));
    };
    let mut v = serde_json::to_value(base).map_err(|e| invalid(e.to_string()))?;
    for (k, x) in fields {
        if v.get(k).is_none() {
            return Err(invalid(format!("unknown config field {k:?}")));
        }
        v[k] = x.clone();
    }
    serde_json::from_value(v).map_err(|e| invalid(format!("bad config: {e}")))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_training(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    cfg: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<Checkpoint> {
    let mut logs: Vec<StepLog> = Vec::new();
    let every = (cfg.steps / 20).max(1);
    let out = train(ckpt, corpus, cfg, &mut |l| {
        if l.step % every == 0 || l.step + 1 == cfg.steps {
            log::info!("step {:>6}  loss {:.4}  grad_norm {:.3}", l.step, l.loss, l.grad_norm);
        }
        logs.push(*l);
    })?;
    if let Some(p) = log_path {
        write_log_csv(p, &logs)?;
    }
    Ok(out)
}

fn train_config(base: TrainConfig, file: &ConfigFile, steps: Option<usize>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = overlay(base, file.train.as_ref())?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = read_config(a.config.as_deref())?;
    let model: ModelConfig = overlay(ModelConfig::default(), file.model.as_ref())?;
    model.validate()?;
    let cfg = train_config(TrainConfig::pretrain(), &file, a.steps, a.seed)?;
    let corpus = match &a.corpus {
        Some(p) => Corpus::load(p)?,
        None => Corpus::synthetic(cfg.seed, a.synthetic_bytes),
    };
    let init = Checkpoint::init(model, cfg.seed)?;
    log::info!("training {} parameters on {} ({} tokens)", init.parameter_count(), corpus.id, corpus.len());
    let out = run_training(&init, &corpus, &cfg, a.log.as_deref())?;
    save_checkpoint(&out, &a.out)?;
    println!("{}", out.fingerprint());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<()> {
    let file = read_config(a.config.as_deref())?;
    if file.model.is_some() {
        return Err(invalid("finetune takes the model from --ckpt; remove the `model` section"));
    }
    let cfg = train_config(TrainConfig::finetune(), &file, a.steps, a.seed)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let corpus = Corpus::load(&a.corpus)?;
    let out = run_training(&ckpt, &corpus, &cfg, a.log.as_deref())?;
    save_checkpoint(&out, &a.out)?;
    println!("{}", out.fingerprint());
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let corpus = Corpus::load(&a.corpus)?;
    let variant = a.rope_variant.unwrap_or(if ckpt.config.pos_encoding == PosEncoding::Rope {
        RopeVariant::Both
    } else {
        RopeVariant::PreRope
    });
    let grams = collect_grams(&ckpt, &corpus, a.groups, variant, a.seq_len)?;
    log::info!("collected grams over {} tokens from {}", grams.token_count(), corpus.id);
    save_grams(&grams, &a.out)?;
    Ok(())
}

fn cmd_compress(a: CompressArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let plan = CompressionPlan::new(a.strategy, a.groups, a.rope_mode, a.key_grouping, &ckpt)?;
    let grams = match (&a.grams, a.strategy) {
        (Some(p), Strategy::SvdA) => Some(load_grams(p)?),
        (None, Strategy::SvdA) => return Err(invalid("svd-a needs --grams")),
        _ => None,
    };
    let out = compress(&ckpt, grams.as_ref(), &plan)?;
    save_checkpoint(&out, &a.out)?;
    log::info!(
        "{} g={} rope_mode={:?}: kv compression ratio {:.3}",
        a.strategy,
        a.groups,
        plan.rope_mode,
        compression_ratio(ckpt.config.n_heads, a.groups)?
    );
    println!("{}", out.fingerprint());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let corpus = Corpus::load(&a.corpus)?;
    let ppl = perplexity(&ckpt, &corpus, a.seq_len)?;
    let rec = serde_json::json!({
        "checkpoint": ckpt.fingerprint(),
        "corpus": corpus.id,
        "seq_len": a.seq_len,
        "ppl": ppl,
        "kv_bytes": kv_memory_bytes(&ckpt.config, a.seq_len, 4),
    });
    write_output(a.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&rec).expect("json")))
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let mut res = throughput_bench(&ckpt, a.context, a.gen, a.repeats)?;
    if let Some(p) = &a.corpus {
        res.ppl = Some(perplexity(&ckpt, &Corpus::load(p)?, 128)?);
    }
    write_output(a.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&res).expect("json")))
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let grams = load_grams(&a.grams)?;
    let rows = spectrum_report(&grams, &a.fractions)?;
    let mut buf = Vec::new();
    write_spectrum_csv(&mut buf, &rows)?;
    match &a.out {
        Some(p) => {
            fs::write(p, &buf)?;
            print!("{}", spectrum_summary(&rows));
        }
        None => std::io::stdout().write_all(&buf)?,
    }
    match (&a.ckpt, &a.corpus) {
        (Some(ck), Some(corpus)) => {
            let ckpt = load_checkpoint(ck)?;
            let plan = CompressionPlan::new(a.strategy, grams.groups, a.rope_mode, a.key_grouping, &ckpt)?;
            let proj = match a.strategy {
                Strategy::SvdA => svd_a_projections(&ckpt, &grams, &plan, a.rank)?,
                Strategy::SvdW => svd_w_projections(&ckpt, &plan, a.rank)?,
                Strategy::MeanPool => return Err(invalid("reconstruction report needs svd-a or svd-w projections")),
            };
            let rows = cache_reconstruction_report(&ckpt, &proj, &Corpus::load(corpus)?, a.seq_len)?;
            let mut buf = Vec::new();
            write_reconstruction_csv(&mut buf, &rows)?;
            match &a.recon_out {
                Some(p) => fs::write(p, &buf)?,
                None => std::io::stdout().write_all(&buf)?,
            }
            eprint!("{}", reconstruction_summary(&rows));
        }
        (None, None) => {}
        _ => return Err(invalid("the reconstruction report needs both --ckpt and --corpus")),
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let prompt: Vec<u32> = a.prompt.bytes().map(u32::from).collect();
    if prompt.is_empty() {
        return Err(invalid("prompt is empty"));
    }
    let out = greedy_generate(&ckpt, &prompt, a.gen)?;
    let bytes: Vec<u8> = out.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    println!("{}{}", a.prompt, String::from_utf8_lossy(&bytes));
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("KVSHRINK_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = cli.threads;
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
