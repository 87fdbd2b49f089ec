use std::path::PathBuf;
use std::process::{Command, Output};

fn config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/oracle_small.toml")
}

fn prl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prl")).args(args).output().unwrap()
}

fn cfg() -> String {
    config().display().to_string()
}

#[test]
fn train_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = prl(&["train", "-c", &cfg(), "--steps", "10", "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "metrics.jsonl", "metrics.csv", "summary.json", "checkpoints/final.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let ckpt = dir.path().join("checkpoints/final.json");
    let out = prl(&["eval", "-c", &cfg(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["avg_at_n"].as_f64().unwrap() <= summary["pass_at_n"].as_f64().unwrap());
}

#[test]
fn oracle_prints_partition_function() {
    let out = prl(&["oracle", "-c", &cfg(), "--prompt", "0", "--top-k", "4"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("ln Z = 0.357374"), "{text}");
    assert_eq!(text.matches("pi* =").count(), 4);
}

#[test]
fn gradcheck_passes() {
    let out = prl(&["gradcheck", "-c", &cfg(), "--batches", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_dataset_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let out = prl(&["gen-dataset", "-c", &cfg(), "--out", path.to_str().unwrap(), "--samples", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = std::fs::read_to_string(&path).unwrap();
    assert_eq!(lines.lines().count(), 3);
}

#[test]
fn config_errors_exit_2() {
    let out = prl(&["train", "-c", &cfg(), "--set", "eta=-1", "--output-dir", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
    let out = prl(&["oracle", "-c", &cfg(), "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = prl(&["oracle", "-c", "/nonexistent.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_3_and_dumps_batch() {
    let dir = tempfile::tempdir().unwrap();
    let out = prl(&[
        "train",
        "-c",
        &cfg(),
        "--set",
        "init_scale=1e308",
        "--steps",
        "5",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(dir.path().join("failure_step_1.jsonl").exists());
}
