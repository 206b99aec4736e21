mod common;

use common::{cache_projections, random_tokens, reference_logits, rng};
use kvshrink::analysis::cache_reconstruction_report;
use kvshrink::calibration::{collect_grams, RopeVariant};
use kvshrink::compress::{
    apply_projections, compress, svd_a_projections, svd_w_projections, CompressionPlan, KeyGrouping, RopeMode,
    Strategy,
};
use kvshrink::corpus::Corpus;
use kvshrink::eval::kv_memory_bytes;
use kvshrink::model::{forward, AttentionKind, Checkpoint, ModelConfig, PosEncoding};
use kvshrink::{Error, Matrix};

fn model(pos: PosEncoding, seed: u64) -> Checkpoint {
    Checkpoint::init(ModelConfig::tiny(32, 8, 2, pos), seed).unwrap()
}

fn grams_for(ck: &Checkpoint, groups: usize) -> kvshrink::calibration::GramSet {
    collect_grams(ck, &Corpus::synthetic(11, 3000), groups, RopeVariant::Both, 64).unwrap()
}

fn plan(ck: &Checkpoint, s: Strategy, g: usize, mode: Option<RopeMode>, kg: KeyGrouping) -> CompressionPlan {
    CompressionPlan::new(s, g, mode, kg, ck).unwrap()
}

fn max_diff_vs_oracle(ck: &Checkpoint, compressed: &Checkpoint, proj: &kvshrink::compress::ProjectionSet) -> f64 {
    let oracle = cache_projections(proj);
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let toks = random_tokens(&mut r, 48);
        let (got, _) = forward(compressed, &toks).unwrap();
        let want = reference_logits(ck, &toks, Some(&oracle));
        worst = worst.max(got.max_abs_diff(&want));
    }
    worst
}

#[test]
fn fused_svd_a_matches_explicit_cache_projection() {
    for g in [1, 2, 4] {
        let ck = model(PosEncoding::Alibi, 1);
        let gs = grams_for(&ck, g);
        let p = plan(&ck, Strategy::SvdA, g, None, KeyGrouping::Whole);
        let proj = svd_a_projections(&ck, &gs, &p, None).unwrap();
        assert!(proj.max_orthonormality_defect() < 1e-8);
        let out = apply_projections(&ck, &proj, &p).unwrap();
        assert_eq!(out.config.n_kv_heads, g);
        assert_eq!(out.config.attention_kind, AttentionKind::Standard);
        let d = max_diff_vs_oracle(&ck, &out, &proj);
        assert!(d < 1e-5, "g={g}: {d}");
    }
}

#[test]
fn fused_svd_w_matches_explicit_cache_projection() {
    let ck = model(PosEncoding::None, 2);
    let p = plan(&ck, Strategy::SvdW, 2, None, KeyGrouping::Whole);
    let proj = svd_w_projections(&ck, &p, None).unwrap();
    let out = apply_projections(&ck, &proj, &p).unwrap();
    assert!(max_diff_vs_oracle(&ck, &out, &proj) < 1e-5);
}

#[test]
fn projected_key_matches_explicit_cache_projection() {
    let ck = model(PosEncoding::Rope, 3);
    let gs = grams_for(&ck, 4);
    for kg in [KeyGrouping::Whole, KeyGrouping::Grouped] {
        for s in [Strategy::SvdA, Strategy::SvdW] {
            let p = plan(&ck, s, 4, None, kg);
            assert_eq!(p.rope_mode, RopeMode::ProjectedKey);
            let proj = match s {
                Strategy::SvdA => svd_a_projections(&ck, &gs, &p, None).unwrap(),
                _ => svd_w_projections(&ck, &p, None).unwrap(),
            };
            let out = apply_projections(&ck, &proj, &p).unwrap();
            assert_eq!(out.config.attention_kind, AttentionKind::ProjectedKey);
            assert_eq!(out.layers[0].wk, ck.layers[0].wk);
            assert_eq!(out.layers[0].key_proj.as_ref().unwrap().shape(), (16, 32));
            let d = max_diff_vs_oracle(&ck, &out, &proj);
            assert!(d < 1e-5, "{s} {kg:?}: {d}");
        }
    }
}

#[test]
fn full_rank_is_lossless_for_every_strategy() {
    for pos in [PosEncoding::Alibi, PosEncoding::Rope] {
        let ck = model(pos, 4);
        let gs = grams_for(&ck, 8);
        let toks = random_tokens(&mut rng(8), 64);
        let (base, _) = forward(&ck, &toks).unwrap();
        for s in [Strategy::MeanPool, Strategy::SvdW, Strategy::SvdA] {
            let out = compress(&ck, Some(&gs), &plan(&ck, s, 8, None, KeyGrouping::Whole)).unwrap();
            let (got, _) = forward(&out, &toks).unwrap();
            assert!(got.max_abs_diff(&base) < 1e-5, "{pos:?} {s}: {}", got.max_abs_diff(&base));
        }
    }
}

#[test]
fn svd_w_exact_for_low_rank_group_weights() {
    let mut ck = model(PosEncoding::None, 5);
    let mut r = rng(9);
    // Give every group's concatenated key and value weights rank d_h.
    for l in &mut ck.layers {
        for w in [&mut l.wk, &mut l.wv] {
            for p in 0..4 {
                let a = Matrix::random_normal(32, 4, 0.2, &mut r);
                let b = Matrix::random_normal(4, 8, 1.0, &mut r);
                w.set_columns(p * 8, &a.matmul(&b).unwrap());
            }
        }
    }
    ck.round_to_f32();
    let out = compress(&ck, None, &plan(&ck, Strategy::SvdW, 4, None, KeyGrouping::Whole)).unwrap();
    let toks = random_tokens(&mut r, 40);
    let (a, _) = forward(&ck, &toks).unwrap();
    let (b, _) = forward(&out, &toks).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-5, "{}", a.max_abs_diff(&b));
}

#[test]
fn svd_a_cache_error_never_exceeds_svd_w_on_calibration_data() {
    let ck = model(PosEncoding::Alibi, 6);
    let calib = Corpus::synthetic(11, 3000);
    let gs = collect_grams(&ck, &calib, 2, RopeVariant::PreRope, 64).unwrap();
    let p = plan(&ck, Strategy::SvdA, 2, None, KeyGrouping::Whole);
    let a = cache_reconstruction_report(&ck, &svd_a_projections(&ck, &gs, &p, None).unwrap(), &calib, 64).unwrap();
    let w = cache_reconstruction_report(&ck, &svd_w_projections(&ck, &p, None).unwrap(), &calib, 64).unwrap();
    assert_eq!(a.len(), w.len());
    for (x, y) in a.iter().zip(&w) {
        assert!(x.rel_frob_error <= y.rel_frob_error + 1e-9, "{x:?} vs {y:?}");
    }
}

#[test]
fn output_cache_is_g_over_h_of_original() {
    let ck = model(PosEncoding::Rope, 7);
    let gs = grams_for(&ck, 4);
    let orig = kv_memory_bytes(&ck.config, 100, 4);
    for s in [Strategy::MeanPool, Strategy::SvdW, Strategy::SvdA] {
        let out = compress(&ck, Some(&gs), &plan(&ck, s, 4, None, KeyGrouping::Whole)).unwrap();
        let (_, cache) = forward(&out, &random_tokens(&mut rng(1), 100)).unwrap();
        assert_eq!(cache.live_bytes() * 2, orig);
    }
}

#[test]
fn stale_grams_are_rejected() {
    let ck = model(PosEncoding::Alibi, 8);
    let other = model(PosEncoding::Alibi, 9);
    let gs = grams_for(&other, 4);
    let err = compress(&ck, Some(&gs), &plan(&ck, Strategy::SvdA, 4, None, KeyGrouping::Whole)).unwrap_err();
    match err {
        Error::Consistency(m) => {
            assert!(m.contains(&ck.fingerprint()) && m.contains(&other.fingerprint()), "{m}");
        }
        e => panic!("{e:?}"),
    }
    let gs2 = grams_for(&ck, 2);
    assert!(matches!(
        compress(&ck, Some(&gs2), &plan(&ck, Strategy::SvdA, 4, None, KeyGrouping::Whole)),
        Err(Error::Consistency(_))
    ));
}

#[test]
fn invalid_plans() {
    let ck = model(PosEncoding::Rope, 10);
    let e = CompressionPlan::new(Strategy::SvdA, 5, None, KeyGrouping::Whole, &ck).unwrap_err();
    assert!(e.to_string().contains("groups must divide heads"));
    assert!(CompressionPlan::new(Strategy::MeanPool, 4, Some(RopeMode::ProjectedKey), KeyGrouping::Whole, &ck).is_err());
    assert!(CompressionPlan::new(Strategy::SvdA, 4, Some(RopeMode::Fused), KeyGrouping::Whole, &ck).is_err());
    let gqa = compress(&ck, None, &plan(&ck, Strategy::MeanPool, 4, None, KeyGrouping::Whole)).unwrap();
    assert!(CompressionPlan::new(Strategy::MeanPool, 2, None, KeyGrouping::Whole, &gqa).is_err());
}

#[test]
fn analysis_ranks_are_not_applied() {
    let ck = model(PosEncoding::Alibi, 11);
    let gs = grams_for(&ck, 4);
    let p = plan(&ck, Strategy::SvdA, 4, None, KeyGrouping::Whole);
    let proj = svd_a_projections(&ck, &gs, &p, Some(3)).unwrap();
    assert!(apply_projections(&ck, &proj, &p).is_err());
    assert!(svd_a_projections(&ck, &gs, &p, Some(17)).is_err());
}
