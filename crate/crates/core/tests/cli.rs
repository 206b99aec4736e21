use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kvshrink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvshrink"))
        .args(args)
        .env("KVSHRINK_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kvshrink(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(pos: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = format!(
            r#"{{"model": {{"d_model": 16, "n_heads": 4, "n_kv_heads": 4, "head_dim": 4, "n_layers": 1, "d_ff": 32,
                 "max_seq_len": 128, "pos_encoding": "{pos}"}},
                "train": {{"batch_size": 2, "seq_len": 32}}}}"#
        );
        fs::write(root.join("config.json"), config).unwrap();
        fs::write(root.join("corpus.txt"), kvshrink::corpus::synthetic_text(1, 3000)).unwrap();
        let r = &root;
        ok(&["train", "--config", &p(r, "config.json"), "--corpus", &p(r, "corpus.txt"), "--steps", "3", "--seed", "4", "--out", &p(r, "m.kvhc"), "--log", &p(r, "train.csv")]);
        Self { _dir: dir, root }
    }
}

#[test]
fn full_pipeline() {
    let f = Fixture::new("alibi");
    let r = &f.root;
    assert!(fs::read_to_string(r.join("train.csv")).unwrap().starts_with("step,loss,grad_norm\n"));
    ok(&["calibrate", "--ckpt", &p(r, "m.kvhc"), "--corpus", &p(r, "corpus.txt"), "--groups", "2", "--out", &p(r, "g.kvgr")]);
    ok(&["compress", "--strategy", "svd-a", "--groups", "2", "--ckpt", &p(r, "m.kvhc"), "--grams", &p(r, "g.kvgr"), "--out", &p(r, "c.kvhc")]);
    ok(&["compress", "--strategy", "mean-pool", "--groups", "2", "--ckpt", &p(r, "m.kvhc"), "--out", &p(r, "mp.kvhc")]);
    let eval: serde_json::Value = serde_json::from_str(&ok(&["eval", "--ckpt", &p(r, "c.kvhc"), "--corpus", &p(r, "corpus.txt"), "--seq-len", "64"])).unwrap();
    assert!(eval["ppl"].as_f64().unwrap() > 1.0);
    ok(&["bench", "--ckpt", &p(r, "c.kvhc"), "--context", "32", "--gen", "4", "--repeats", "1", "--out", &p(r, "bench.json")]);
    let bench: serde_json::Value = serde_json::from_slice(&fs::read(r.join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench["kv_bytes"].as_u64().unwrap(), 2 * 2 * 4 * 36 * 4);
    assert!(bench["decode_tokens_per_s"].as_f64().unwrap() > 0.0);
    ok(&["analyze", "--grams", &p(r, "g.kvgr"), "--fractions", "0.25,0.5", "--out", &p(r, "spec.csv"), "--ckpt", &p(r, "m.kvhc"), "--corpus", &p(r, "corpus.txt"), "--recon-out", &p(r, "recon.csv")]);
    assert!(fs::read_to_string(r.join("spec.csv")).unwrap().starts_with("layer,kind,group,fraction,energy_ratio\n0,K_pre_rope,0,"));
    assert!(fs::read_to_string(r.join("recon.csv")).unwrap().starts_with("layer,kind,group,rel_frob_error\n"));
    let text = ok(&["generate", "--ckpt", &p(r, "c.kvhc"), "--prompt", "the ", "--gen", "5"]);
    assert!(text.starts_with("the "));
}

#[test]
fn finetune_writes_a_checkpoint() {
    let f = Fixture::new("rope");
    let r = &f.root;
    ok(&["calibrate", "--ckpt", &p(r, "m.kvhc"), "--corpus", &p(r, "corpus.txt"), "--groups", "2", "--out", &p(r, "g.kvgr")]);
    ok(&["compress", "--strategy", "svd-a", "--groups", "2", "--ckpt", &p(r, "m.kvhc"), "--grams", &p(r, "g.kvgr"), "--rope-mode", "projected-key", "--out", &p(r, "c.kvhc")]);
    fs::write(r.join("ft.json"), r#"{"train": {"batch_size": 2, "seq_len": 32}}"#).unwrap();
    ok(&["finetune", "--ckpt", &p(r, "c.kvhc"), "--corpus", &p(r, "corpus.txt"), "--config", &p(r, "ft.json"), "--steps", "2", "--out", &p(r, "ft.kvhc")]);
    let ck = kvshrink::model::load_checkpoint(&r.join("ft.kvhc")).unwrap();
    assert_eq!(ck.config.n_kv_heads, 2);
    assert!(ck.layers[0].key_proj.is_some());
}

#[test]
fn outputs_are_reproducible() {
    let a = Fixture::new("alibi");
    let b = Fixture::new("alibi");
    assert_eq!(fs::read(a.root.join("m.kvhc")).unwrap(), fs::read(b.root.join("m.kvhc")).unwrap());
}

#[test]
fn exit_codes() {
    let f = Fixture::new("rope");
    let r = &f.root;
    let out = kvshrink(&["compress", "--strategy", "svd-a", "--groups", "5", "--ckpt", &p(r, "m.kvhc"), "--grams", "x", "--out", &p(r, "c.kvhc")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("groups must divide heads"));

    let out = kvshrink(&["compress", "--strategy", "svd-a", "--groups", "2", "--rope-mode", "fused", "--ckpt", &p(r, "m.kvhc"), "--out", &p(r, "c.kvhc")]);
    assert_eq!(out.status.code(), Some(2));

    // Grams from a different checkpoint.
    let other = Fixture::new("rope");
    fs::write(r.join("c2.txt"), kvshrink::corpus::synthetic_text(9, 1000)).unwrap();
    ok(&["train", "--config", &p(r, "config.json"), "--corpus", &p(r, "c2.txt"), "--steps", "2", "--out", &p(r, "m2.kvhc")]);
    ok(&["calibrate", "--ckpt", &p(r, "m2.kvhc"), "--corpus", &p(r, "corpus.txt"), "--groups", "2", "--out", &p(r, "g2.kvgr")]);
    let out = kvshrink(&["compress", "--strategy", "svd-a", "--groups", "2", "--ckpt", &p(&other.root, "m.kvhc"), "--grams", &p(r, "g2.kvgr"), "--out", &p(r, "c.kvhc")]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr).to_string();
    let h1 = kvshrink::model::load_checkpoint(&other.root.join("m.kvhc")).unwrap().fingerprint();
    let h2 = kvshrink::model::load_checkpoint(&r.join("m2.kvhc")).unwrap().fingerprint();
    assert!(msg.contains(&h1) && msg.contains(&h2), "{msg}");

    let out = kvshrink(&["compress", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = kvshrink(&["eval", "--ckpt", &p(r, "missing.kvhc"), "--corpus", &p(r, "corpus.txt")]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(r.join("bad.kvhc"), b"NOPE").unwrap();
    let out = kvshrink(&["eval", "--ckpt", &p(r, "bad.kvhc"), "--corpus", &p(r, "corpus.txt")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_flags_and_formats() {
    for sub in ["train", "calibrate", "compress", "finetune", "eval", "bench", "analyze", "generate"] {
        let out = kvshrink(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("KVHC") && text.contains("KVGR"), "{sub}");
        assert!(text.contains("--threads"), "{sub}");
    }
    let text = String::from_utf8(kvshrink(&["compress", "--help"]).stdout).unwrap();
    for flag in ["--strategy", "--groups", "--rope-mode", "--grams", "--ckpt", "--out"] {
        assert!(text.contains(flag));
    }
}
