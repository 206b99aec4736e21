use kvshrink_web::{compare_json, kv_memory, spectrum_json};

fn text() -> String {
    String::from_utf8(kvshrink::corpus::synthetic_text(3, 1500)).unwrap()
}

#[test]
fn spectrum_rows_cover_every_fraction() {
    let rows: serde_json::Value = serde_json::from_str(&spectrum_json(&text(), 4, true, 1).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert!(rows.iter().any(|r| r["kind"] == "K_post_rope"));
    for r in rows.iter().filter(|r| r["fraction"] == 1.0) {
        assert!((r["energy_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn compare_reports_all_strategies() {
    let v: serde_json::Value = serde_json::from_str(&compare_json(&text(), 4, false, 1).unwrap()).unwrap();
    assert_eq!(v["compression_ratio"], 0.5);
    assert_eq!(v["kv_bytes_per_token"]["compressed"].as_u64().unwrap() * 2, v["kv_bytes_per_token"]["original"].as_u64().unwrap());
    let names: Vec<&str> = v["strategies"].as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["original", "mean-pool", "svd-w", "svd-a"]);
}

#[test]
fn full_rank_drift_is_negligible() {
    let v: serde_json::Value = serde_json::from_str(&compare_json(&text(), 8, true, 2).unwrap()).unwrap();
    for s in v["strategies"].as_array().unwrap() {
        assert!(s["logit_drift"].as_f64().unwrap() < 1e-5, "{s}");
    }
}

#[test]
fn rejects_bad_input() {
    assert!(compare_json("short", 4, false, 1).is_err());
    assert!(compare_json(&text(), 3, false, 1).is_err());
}

#[test]
fn memory_calculator() {
    assert_eq!(kv_memory(4, 8, 8, 128), 262_144.0);
    assert_eq!(kv_memory(4, 4, 8, 128), 131_072.0);
}
