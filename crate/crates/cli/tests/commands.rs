use std::fs;
use std::path::Path;
use std::process::Command;

use pseudoclass_cli::artifacts::{read_pseudo_labels, read_train_log, FeatureDump};
use pseudoclass_cli::commands::read_sweep;

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pseudoclass")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &Path) {
    ok(&["gen-data", "--classes", "3", "--per-class", "12", "--height", "8", "--width", "8", "--seed", "1", "--out", s(dir)]);
}

fn train(data: &Path, out: &Path, seed: &str) {
    let manifest = data.join("manifest.csv");
    let args = vec![
        "train",
        "--data",
        s(&manifest),
        "--out",
        s(out),
        "--iterations",
        "10",
        "--batch-size",
        "8",
        "--num-pseudo-classes",
        "3",
        "--lambda",
        "1e-3",
        "--learning-rate",
        "1e-3",
        "--warm-start-centers",
        "--checkpoint-every",
        "5",
        "--seed",
        seed,
    ];
    ok(&args);
}

#[test]
fn missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere/manifest.csv");
    let out = cli(&["train", "--data", s(&missing), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn invalid_config_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nlearning_rate = -1.0\n").unwrap();
    small_data(&dir.path().join("d"));
    let manifest = dir.path().join("d/manifest.csv");
    let out = cli(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&dir.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!dir.path().join("r/train_log.jsonl").exists());
}

#[test]
fn smoke_run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    small_data(&data);
    let run = dir.path().join("r");
    train(&data, &run, "2");
    let (header, records) = read_train_log(&run.join("train_log.jsonl")).unwrap();
    assert_eq!(header.version, 1);
    assert_eq!(records.len(), 10);
    assert_eq!(records.last().unwrap().iteration, 10);
    assert!(run.join("final.ckpt").is_file());
    assert!(run.join("checkpoints/ckpt_00000005.bin").is_file());
    assert!(run.join("timing.json").is_file());
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    small_data(&data);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&data, &a, "2");
    train(&data, &b, "2");
    for name in ["train_log.jsonl", "final.ckpt", "checkpoints/ckpt_00000005.bin"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = dir.path().join("c");
    train(&data, &c, "3");
    assert_ne!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(c.join("final.ckpt")).unwrap());
}

#[test]
fn extraction_twins_agree_and_cover_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    small_data(&data);
    let run = dir.path().join("r");
    train(&data, &run, "2");
    ok(&["extract", "--checkpoint", s(&run.join("checkpoints/ckpt_00000005.bin")), "--data", s(&data.join("manifest.csv")), "--out", s(&run)]);
    let csv = FeatureDump::read(&run.join("features.csv")).unwrap();
    let bin = FeatureDump::read(&run.join("features.bin")).unwrap();
    assert_eq!(csv, bin);
    assert_eq!(csv.ids.len(), 36);
    assert_eq!(csv.dim(), 64);
    assert_eq!(read_pseudo_labels(&run.join("pseudo_labels.csv")).unwrap().len(), 36);
    let first = fs::read_to_string(run.join("features.csv")).unwrap();
    assert!(first.starts_with("#pseudoclass-features v1"));
}

#[test]
fn eval_requires_labels_and_reports_purity() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    small_data(&data);
    let run = dir.path().join("r");
    train(&data, &run, "2");
    ok(&["extract", "--checkpoint", s(&run.join("final.ckpt")), "--data", s(&data.join("manifest.csv")), "--out", s(&run)]);
    let out = cli(&["eval", "--features", s(&run.join("features.csv")), "--labels", s(&dir.path().join("none.csv")), "--out", s(&run)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels"));

    ok(&["eval", "--features", s(&run.join("features.bin")), "--labels", s(&data.join("labels.csv")), "--out", s(&run), "--folds", "3"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("eval_report.json")).unwrap()).unwrap();
    let folds: Vec<f64> = serde_json::from_value(report["fold_accuracies"].clone()).unwrap();
    assert_eq!(folds.len(), 3);
    let mean = folds.iter().sum::<f64>() / 3.0;
    assert_eq!(report["mean"].as_f64().unwrap(), mean);
    assert!(report["purity"].as_f64().is_some());
    assert!(fs::read_to_string(run.join("confusion.csv")).unwrap().starts_with("#pseudoclass-confusion v1"));

    ok(&["report", "--run", s(&run), "--out", s(&run)]);
    let md = fs::read_to_string(run.join("report.md")).unwrap();
    assert!(md.contains("## Training") && md.contains("## Evaluation"));
}

#[test]
fn sweep_sorts_rows_records_failures_and_matches_a_standalone_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    small_data(&data);
    let sweep = dir.path().join("s");
    let manifest = data.join("manifest.csv");
    let labels = data.join("labels.csv");
    let base = [
        "--iterations", "10", "--batch-size", "8", "--lambda", "1e-3", "--learning-rate", "1e-3", "--warm-start-centers", "--seed", "2",
    ];
    let mut args = vec!["sweep", "--data", s(&manifest), "--labels", s(&labels), "--axis", "num-pseudo-classes", "--grid", "3,1", "--out", s(&sweep)];
    args.extend_from_slice(&base);
    let out = cli(&args);
    assert!(!out.status.success(), "a failed point makes the sweep exit non-zero");
    let rows = read_sweep(&sweep.join("sweep.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), [1.0, 3.0]);
    assert!(rows[0].status.starts_with("error"));
    assert_eq!(rows[1].status, "ok");

    // the Λ = 3 point equals a standalone train → extract → eval
    let solo = dir.path().join("solo");
    let mut t = vec!["train", "--data", s(&manifest), "--out", s(&solo), "--num-pseudo-classes", "3"];
    t.extend_from_slice(&base);
    ok(&t);
    ok(&["extract", "--checkpoint", s(&solo.join("final.ckpt")), "--data", s(&manifest), "--out", s(&solo), "--seed", "2"]);
    ok(&["eval", "--features", s(&solo.join("features.bin")), "--labels", s(&labels), "--out", s(&solo), "--seed", "2"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(solo.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(rows[1].mean, report["mean"].as_f64());

    // a rerun reproduces the table byte for byte
    let again = dir.path().join("s2");
    let mut args2 = args.clone();
    let pos = args2.iter().position(|a| *a == s(&sweep)).unwrap();
    args2[pos] = s(&again);
    let _ = cli(&args2);
    assert_eq!(fs::read(sweep.join("sweep.csv")).unwrap(), fs::read(again.join("sweep.csv")).unwrap());
}

#[test]
fn sweep_help_lists_the_lambda_axis() {
    let out = cli(&["sweep", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("lambda"));
}
