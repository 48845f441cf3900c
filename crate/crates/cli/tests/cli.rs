//! End-to-end runs of the `skipsponge` binary on small synthetic configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use skipsponge_cli::error::{EXIT_CONFIG, EXIT_DATA, EXIT_NO_SPARSITY_LAYERS, EXIT_NUMERIC};
use skipsponge_core::model::load_model;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skipsponge")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Writes `cfg` as `dir/config.json` and returns its path.
fn config(dir: &Path, cfg: Value) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn small_cnn(out: &Path) -> Value {
    json!({
        "seed": 11,
        "out_dir": out,
        "dataset": {"kind": "blobs", "classes": 4, "per_class": 100, "shape": [1, 8, 8]},
        "train": {"epochs": 6},
        "attack": {"subset": 0.05}
    })
}

fn summary(dir: &Path, verb: &str) -> Vec<Value> {
    let text = std::fs::read_to_string(dir.join(format!("{verb}_summary.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn bytes(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn blobs_mlp_trains_to_high_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config(
        dir.path(),
        json!({"out_dir": out, "dataset": {"kind": "blobs", "classes": 2, "per_class": 150, "shape": [16]}}),
    );
    ok(&["train", "--config", &cfg]);
    let s = &summary(&out, "train")[0];
    assert_eq!(s["model"], "mlp");
    assert!(s["performance_after"].as_f64().unwrap() >= 0.99, "{s}");
    let metrics = std::fs::read_to_string(out.join("train_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 10, "header plus one row per epoch");
}

#[test]
fn same_seed_gives_identical_model_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = config(dir.path(), small_cnn(&a));
    ok(&["train", "--config", &cfg]);
    ok(&["train", "--config", &cfg, "--out", b.to_str().unwrap()]);
    for f in ["clean_model.json", "clean_model.bin", "train_metrics.csv", "train_summary.json"] {
        assert_eq!(bytes(a.join(f)), bytes(b.join(f)), "{f}");
    }
    ok(&["train", "--config", &cfg, "--out", dir.path().join("c").to_str().unwrap(), "--seed", "12"]);
    assert_ne!(bytes(a.join("clean_model.bin")), bytes(dir.path().join("c/clean_model.bin")));
}

#[test]
fn missing_dataset_path_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), json!({"dataset": {"kind": "idx", "images": "nowhere.idx"}}));
    let out = run(&["train", "--config", &cfg]);
    assert_eq!(code(&out), EXIT_CONFIG);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.idx"));
}

#[test]
fn malformed_config_and_bad_ranges_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{ not json").unwrap();
    assert_eq!(code(&run(&["train", "--config", p.to_str().unwrap()])), EXIT_CONFIG);
    assert_eq!(code(&run(&["attack", "--subset", "1.5"])), EXIT_CONFIG);
    assert_eq!(code(&run(&["poison", "--delta", "2"])), EXIT_CONFIG);
}

#[test]
fn corrupt_dataset_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.idx"), [0u8, 0, 8, 3, 0, 0]).unwrap();
    let cfg = config(dir.path(), json!({"out_dir": dir.path().join("run"), "dataset": {"kind": "idx", "images": "x.idx"}}));
    assert_eq!(code(&run(&["train", "--config", &cfg])), EXIT_DATA);
}

#[test]
fn divergence_exits_numeric_and_keeps_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = small_cnn(&out);
    c["train"] = json!({"epochs": 6, "lr": 1e12, "momentum": 0.0});
    let cfg = config(dir.path(), c);
    let res = run(&["train", "--config", &cfg]);
    assert_eq!(code(&res), EXIT_NUMERIC, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("train_metrics.csv").exists());
    assert!(!out.join("clean_model.json").exists());
}

#[test]
fn model_without_sparsity_layers_has_its_own_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = small_cnn(&out);
    c["model"] = json!({"arch": [{"kind": "dense", "out": 4}]});
    let cfg = config(dir.path(), c);
    ok(&["train", "--config", &cfg]);
    let res = run(&["attack", "--config", &cfg]);
    assert_eq!(code(&res), EXIT_NO_SPARSITY_LAYERS);
    assert!(String::from_utf8_lossy(&res.stderr).contains("no sparsity layers"));
}

#[test]
fn attack_without_a_clean_model_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(&["attack", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), EXIT_CONFIG);
    assert!(String::from_utf8_lossy(&res.stderr).contains("clean_model.json"));
}

#[test]
fn attack_raises_ratio_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config(dir.path(), small_cnn(&out));
    ok(&["train", "--config", &cfg]);
    ok(&["attack", "--config", &cfg, "--tau", "5", "--alpha", "0.5"]);
    let s = &summary(&out, "attack")[0];
    assert_eq!(s["method"], "skipsponge");
    assert!(s["ratio_increase_pct"].as_f64().unwrap() > 0.0, "{s}");
    let d = &s["details"];
    let drop = 100.0 * (d["guard_performance_before"].as_f64().unwrap() - d["guard_performance_after"].as_f64().unwrap());
    assert!(drop <= 5.0);

    let mut rdr = csv::Reader::from_path(out.join("attack_per_layer.csv")).unwrap();
    let cum: Vec<f64> = rdr.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert!(!cum.is_empty() && cum.windows(2).all(|w| w[1] >= w[0]), "{cum:?}");

    let trace = std::fs::read_to_string(out.join("attack_trace.csv")).unwrap();
    assert!(trace.lines().count() > 1);
}

#[test]
fn zero_tau_attack_succeeds_even_without_gain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = small_cnn(&out);
    c["train"] = json!({"epochs": 1});
    let cfg = config(dir.path(), c);
    ok(&["train", "--config", &cfg]);
    ok(&["attack", "--config", &cfg, "--tau", "0"]);
    assert!(summary(&out, "attack")[0]["ratio_increase_pct"].as_f64().unwrap() >= 0.0);
}

#[test]
fn poisoning_with_zero_delta_matches_clean_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config(dir.path(), small_cnn(&out));
    ok(&["train", "--config", &cfg]);
    ok(&["poison", "--config", &cfg, "--delta", "0"]);
    assert_eq!(load_model(&out.join("poisoned_model.json")).unwrap(), load_model(&out.join("clean_model.json")).unwrap());
    assert_eq!(bytes(out.join("poison_metrics.csv")), bytes(out.join("train_metrics.csv")));
    let s = &summary(&out, "poison")[0];
    assert_eq!(s["ratio_increase_pct"].as_f64().unwrap(), 0.0);

    let fired = std::fs::read_to_string(out.join("fired_neurons.csv")).unwrap();
    let model = load_model(&out.join("clean_model.json")).unwrap();
    assert_eq!(fired.lines().count(), 1 + model.layers.len());
    assert!(fired.starts_with("layer,fired_clean,fired_poisoned\n"));
}

#[test]
fn poisoning_raises_fired_fraction_somewhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config(dir.path(), small_cnn(&out));
    ok(&["poison", "--config", &cfg, "--lambda", "2.5", "--delta", "0.05"]);
    let mut rdr = csv::Reader::from_path(out.join("fired_neurons.csv")).unwrap();
    let up = rdr.records().map(|r| r.unwrap()).filter(|r| r[2].parse::<f64>().unwrap() > r[1].parse::<f64>().unwrap()).count();
    assert!(up >= 1);
    assert!(out.join("mean_bias.csv").exists());
}

#[test]
fn defenses_on_attacked_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config(dir.path(), small_cnn(&out));
    ok(&["train", "--config", &cfg]);
    ok(&["attack", "--config", &cfg]);
    ok(&["defend", "--config", &cfg]);
    let mut rdr = csv::Reader::from_path(out.join("defense.csv")).unwrap();
    let head = rdr.headers().unwrap().clone();
    let col = |n: &str| head.iter().position(|h| h == n).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let clip = rows
        .iter()
        .rev()
        .find(|r| &r[col("kind")] == "clip_biases_positive" && &r[col("accepted")] == "true")
        .expect("an accepted clipping row");
    assert!(clip[col("ratio_after")].parse::<f64>().unwrap() < clip[col("ratio_before")].parse::<f64>().unwrap());
    assert!(rows.iter().filter(|r| &r[col("kind")] == "noise_weights").all(|r| &r[col("trials")] == "5"));
    let methods: Vec<String> = summary(&out, "defense").iter().map(|s| s["method"].as_str().unwrap().to_string()).collect();
    assert!(methods.contains(&"defense:clip_biases_positive".to_string()), "{methods:?}");
}

#[test]
fn weight_defenses_on_mlp_are_marked_inapplicable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config(
        dir.path(),
        json!({
            "out_dir": out,
            "dataset": {"kind": "blobs", "classes": 2, "per_class": 60, "shape": [6]},
            "train": {"epochs": 3},
            "defense": {"kinds": ["noise_weights", "clip_weights", "clip_biases_positive"]}
        }),
    );
    ok(&["train", "--config", &cfg]);
    ok(&["defend", "--config", &cfg, "--model", out.join("clean_model.json").to_str().unwrap()]);
    let text = std::fs::read_to_string(out.join("defense.csv")).unwrap();
    let inapplicable: Vec<&str> = text.lines().filter(|l| l.contains("inapplicable")).collect();
    assert_eq!(inapplicable.len(), 2, "{text}");
    assert!(inapplicable.iter().all(|l| l.starts_with("noise_weights") || l.starts_with("clip_weights")));
}

#[test]
fn energy_writes_one_row_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = config(dir.path(), small_cnn(&out));
    ok(&["train", "--config", &cfg]);
    ok(&["energy", "--config", &cfg]);
    let model = load_model(&out.join("clean_model.json")).unwrap();
    let csv = std::fs::read_to_string(out.join("energy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + model.layers.len());
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out.join("energy_report.json")).unwrap()).unwrap();
    let mean = rep["mean_batch_ratio"].as_f64().unwrap();
    let train_ratio = summary(&out, "train")[0]["ratio_after"].as_f64().unwrap();
    assert_eq!(mean, train_ratio);
}

#[test]
fn report_merges_runs_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    for name in ["cnn_a", "cnn_b"] {
        let out = root.join(name);
        let mut c = small_cnn(&out);
        c["model"] = json!({"name": name});
        c["train"] = json!({"epochs": 2});
        let cfg = config(dir.path(), c);
        ok(&["train", "--config", &cfg]);
    }
    ok(&["report", root.to_str().unwrap()]);
    let first = bytes(root.join("report.csv"));
    let json_first = bytes(root.join("report.json"));
    let rows: Vec<Value> = serde_json::from_slice(&json_first).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0]["model"].as_str(), rows[1]["model"].as_str()), (Some("cnn_a"), Some("cnn_b")));
    for r in &rows {
        assert_eq!(r["ratio_increase_pct"], r["ratio_increase_recomputed"]);
    }
    ok(&["report", root.to_str().unwrap()]);
    assert_eq!(bytes(root.join("report.csv")), first);
    assert_eq!(bytes(root.join("report.json")), json_first);
}

#[test]
fn report_flags_tampered_and_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut c = small_cnn(&out);
    c["train"] = json!({"epochs": 2});
    let cfg = config(dir.path(), c);
    ok(&["train", "--config", &cfg]);
    ok(&["attack", "--config", &cfg]);

    let path = out.join("attack_summary.json");
    let original = std::fs::read_to_string(&path).unwrap();
    let mut rows: Vec<Value> = serde_json::from_str(&original).unwrap();
    rows[0]["ratio_increase_pct"] = json!(rows[0]["ratio_increase_pct"].as_f64().unwrap() + 1.0);
    std::fs::write(&path, serde_json::to_string(&rows).unwrap()).unwrap();
    assert_eq!(code(&run(&["report", out.to_str().unwrap()])), EXIT_NUMERIC);
    std::fs::write(&path, original).unwrap();

    std::fs::remove_file(out.join("attack_trace.csv")).unwrap();
    let res = run(&["report", out.to_str().unwrap()]);
    assert_eq!(code(&res), EXIT_DATA);
    assert!(String::from_utf8_lossy(&res.stderr).contains("attack_trace.csv"));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&run(&["report", empty.to_str().unwrap()])), EXIT_DATA);
}
