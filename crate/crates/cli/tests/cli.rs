use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn redisc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_redisc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, json: &str) {
    fs::write(dir.join(name), json).unwrap();
}

fn synth_bundle(dir: &Path) {
    write(
        dir,
        "synth.json",
        r#"{"data": {"sbm": {"n_per_class": 20, "num_classes": 3, "p_in": 0.3, "p_out": 0.02,
                              "feat_dim": 6, "feat_noise": 0.5, "seed": 4}},
            "split": {"train_per_class": 4, "val_per_class": 4}}"#,
    );
    let out = redisc(dir, &["synth", "--config", "synth.json", "--out", "bundle"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

const TRAIN: &str = r#"{"T": 6, "S": 4, "em_rounds": 6, "warmup_epochs": 20, "eval_samples": 2,
                        "hidden_dim": 8, "time_dim": 8}"#;

#[test]
fn train_sample_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_bundle(dir);
    write(dir, "train.json", TRAIN);

    let out = redisc(
        dir,
        &["train", "--data", "bundle", "--config", "train.json", "--out", "run"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["denoiser.ckpt", "report.json", "predictions.csv"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }
    let preds = fs::read_to_string(dir.join("run/predictions.csv")).unwrap();
    assert!(preds.starts_with("node_id,class\n"));
    assert_eq!(preds.lines().count(), 61);

    let out = redisc(
        dir,
        &[
            "sample",
            "--data",
            "bundle",
            "--config",
            "train.json",
            "--checkpoint",
            "run/denoiser.ckpt",
            "--out",
            "s",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let labels = fs::read_to_string(dir.join("s/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 61);
    let trace: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("s/trace.json")).unwrap()).unwrap();
    assert!(trace.is_array() || trace.is_object());

    let out = redisc(
        dir,
        &[
            "eval",
            "--data",
            "bundle",
            "--predictions",
            "run/predictions.csv",
            "--scope",
            "all",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let node = metrics["test_node_accuracy"].as_f64().unwrap();
    let sub = metrics["subgraph_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&node) && sub <= 1.0);
}

#[test]
fn baseline_and_report_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_bundle(dir);
    let out = redisc(dir, &["baseline", "--method", "lp", "--data", "bundle", "--out", "bl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("bl/report.json").exists());

    write(
        dir,
        "exp.json",
        &format!(
            r#"{{"data": {{"bundle": "bundle"}}, "seeds": [0, 1], "methods": ["lp", "gnn", "redisc"],
                "settings": {{"train": {TRAIN}, "gnn": {{"epochs": 20}}}}}}"#
        ),
    );
    let out = redisc(
        dir,
        &["report", "--config", "exp.json", "--out", "rep", "--threads", "1"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("rep/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn exit_codes_distinguish_config_and_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_bundle(dir);

    let out = redisc(dir, &["train", "--data", "bundle", "--config", "synth.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let out = redisc(dir, &["train", "--data", "nowhere"]);
    assert_eq!(out.status.code(), Some(3));

    let out = redisc(dir, &["bogus"]);
    assert_eq!(out.status.code(), Some(2));

    write(dir, "bad.json", r#"{"T": 0}"#);
    let out = redisc(dir, &["train", "--data", "bundle", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
}
