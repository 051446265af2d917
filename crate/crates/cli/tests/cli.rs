use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = ["--epochs", "10", "--batch-size", "40", "--lambda2-grid", "0,0.01"];

fn kflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kflow"))
        .args(args)
        .current_dir(dir)
        .env("KFLOW_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kflow(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn data_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split(',').map(|c| c.parse().ok()).collect())
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_requested_rows_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["generate", "--system", "Rossler", "--n", "2", "--out", "r.csv"]);
    assert!(stdout.contains("n=2 d=3"));
    let text = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(text.contains("# input_digest=builtin:Rossler"));
    assert_eq!(data_rows(&dir.path().join("r.csv")).len(), 2);
}

#[test]
fn unknown_system_is_a_usage_error_listing_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = kflow(dir.path(), &["generate", "--system", "henon", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Lorenz") && err.contains("Duffing"), "{err}");
}

#[test]
fn malformed_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.csv"), "1,2\n3\n").unwrap();
    let out = kflow(dir.path(), &["train", "--input", "bad.csv", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error (data)"));
}

#[test]
fn regular_training_keeps_every_weight() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--system", "lorenz", "--n", "200", "--out", "l.csv"]);
    let mut args = vec!["train", "--input", "l.csv", "--mode", "regular", "--out", "m.json"];
    args.extend(SMALL);
    let stdout = ok(dir.path(), &args);
    assert!(stdout.contains("nnz_alpha=21") && stdout.contains("lambda2=0"), "{stdout}");
    let report = json(&dir.path().join("m.report.json"));
    assert!(report["cv"].is_null());
    assert_eq!(report["report"]["loss_history"].as_array().unwrap().len(), 10);
    assert!(dir.path().join("m.loss.csv").exists());
}

#[test]
fn forecast_modes_agree_on_first_step_and_report_both_metrics() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--system", "lorenz", "--n", "200", "--out", "l.csv"]);
    let mut args = vec!["train", "--input", "l.csv", "--out", "m.json"];
    args.extend(SMALL);
    ok(dir.path(), &args);
    ok(dir.path(), &["forecast", "--model", "m.json", "--input", "l.csv", "--out", "one.csv"]);
    ok(
        dir.path(),
        &["forecast", "--model", "m.json", "--input", "l.csv", "--mode", "rollout", "--steps", "1", "--out", "roll.csv"],
    );
    let one = data_rows(&dir.path().join("one.csv"));
    let roll = data_rows(&dir.path().join("roll.csv"));
    assert_eq!(one.len(), 195);
    assert_eq!(roll.len(), 1);
    assert_eq!(one[0], roll[0]);
    let scores = json(&dir.path().join("one.scores.json"));
    assert!(scores["smape"].as_f64().unwrap() >= 0.0);
    assert!(scores["hausdorff"].as_f64().unwrap() >= 0.0);
    assert_eq!(scores["command"], "forecast");
}

#[test]
fn forecast_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--system", "lorenz", "--n", "100", "--out", "l.csv"]);
    ok(dir.path(), &["generate", "--system", "duffing", "--n", "100", "--out", "d.csv"]);
    let mut args = vec!["train", "--input", "l.csv", "--mode", "regular", "--out", "m.json"];
    args.extend(SMALL);
    ok(dir.path(), &args);
    let out = kflow(dir.path(), &["forecast", "--model", "m.json", "--input", "d.csv", "--out", "p.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn interpolating_model_reproduces_training_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--system", "thomas", "--n", "60", "--out", "t.csv"]);
    let args = ["train", "--input", "t.csv", "--mode", "regular", "--out", "m.json", "--lambda1", "0", "--epochs", "0"];
    ok(dir.path(), &args);
    let stdout = ok(dir.path(), &["forecast", "--model", "m.json", "--input", "t.csv", "--out", "p.csv"]);
    let smape: f64 = stdout.split("smape=").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
    assert!(smape < 1e-3, "{stdout}");
}

#[test]
fn benchmark_writes_every_format_and_partitions_wins() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("manifest.txt"), "# three builtins\nlorenz\nrossler\nthomas\n").unwrap();
    let mut args = vec!["benchmark", "--manifest", "manifest.txt", "--out", "out", "--n", "200"];
    args.extend(SMALL);
    let stdout = ok(dir.path(), &args);
    let wins: usize = stdout
        .split_whitespace()
        .filter_map(|t| t.split_once('=').and_then(|(_, v)| v.parse::<usize>().ok()))
        .sum();
    assert!(stdout.contains("(scored 3 of 3)"), "{stdout}");
    assert_eq!(wins, 3);
    let out = dir.path().join("out");
    let report = json(&out.join("report.json"));
    assert_eq!(report["report"]["rows"].as_array().unwrap().len(), 3);
    assert_eq!(data_rows(&out.join("distribution.csv")).len(), 3);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert!(fs::read_to_string(out.join("report.md")).unwrap().contains("| Name |"));
}

#[test]
fn empty_manifest_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.txt"), "# nothing\n").unwrap();
    let out = kflow(dir.path(), &["benchmark", "--manifest", "m.txt", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kflow"))
        .args(["generate", "--system", "lorenz", "--n", "10", "--out", "x.csv"])
        .current_dir(dir.path())
        .env("KFLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
