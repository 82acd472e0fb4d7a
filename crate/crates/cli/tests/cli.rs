//! Runs the `fewshot` binary against a quickly pretrained checkpoint.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const QUICK: [&str; 4] = ["--set", "pretrain.steps=150", "--seeds", "0,1"];

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/hard.toml")
}

fn fewshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewshot")).args(args).output().unwrap()
}

/// `cmd -c hard.toml --out dir` with the quick overrides and `extra`.
fn run_in(dir: &Path, cmd: &[&str], extra: &[&str]) -> Output {
    let cfg = config();
    let mut args: Vec<&str> = cmd.to_vec();
    args.extend(["-c", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    args.extend(QUICK);
    args.extend(extra);
    let out = fewshot(&args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// A directory holding a pretrained checkpoint; each test copies it.
fn pretrained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        run_in(dir.path(), &["pretrain"], &[]);
        dir
    })
    .path()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(pretrained().join("pretrained.ckpt"), dir.path().join("pretrained.ckpt")).unwrap();
    dir
}

/// Data lines of a CSV written by the tool, without the hash comment and header.
fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# config_hash: "), "{} lacks the hash line", path.display());
    text.lines().skip(2).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = fewshot(&["adapt", "-c", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fewshot(&["adapt", "-c", config().to_str().unwrap(), "--set", "adapt.nonsense=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fewshot(&["sweep", "-c", config().to_str().unwrap(), "--param", "gamma"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let out = fewshot(&["adapt", "-c", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn adapt_writes_one_row_per_seed_and_a_mean() {
    let dir = workspace();
    let before = std::fs::read(config()).unwrap();
    run_in(dir.path(), &["adapt"], &["--M", "10"]);
    assert_eq!(std::fs::read(config()).unwrap(), before);
    let text = std::fs::read_to_string(dir.path().join("adapt_metrics.csv")).unwrap();
    assert_eq!(text.lines().nth(1), Some("protocol,seed,peft,alpha,M,k,base_acc,novel_acc,hm,text_encoder_calls"));
    let rows = csv_rows(&dir.path().join("adapt_metrics.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][1], "mean");
    let mean: f64 = (rows[0][8].parse::<f64>().unwrap() + rows[1][8].parse::<f64>().unwrap()) / 2.0;
    assert!((rows[2][8].parse::<f64>().unwrap() - mean).abs() < 1e-9);
    for seed in [0, 1] {
        let curve = std::fs::read_to_string(dir.path().join(format!("adapt_curve_seed{seed}.csv"))).unwrap();
        assert_eq!(curve.lines().nth(1), Some("iter,loss,base_acc,novel_acc"));
        assert!(dir.path().join(format!("adapt_seed{seed}.ckpt")).exists());
    }
    let report = fewshot(&["report", dir.path().to_str().unwrap()]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("seed   1"));
}

#[test]
fn alpha_one_matches_single_stage() {
    let dir = workspace();
    run_in(dir.path(), &["adapt"], &["--M", "10", "--alpha", "1.0"]);
    run_in(dir.path(), &["single-stage"], &["--M", "10", "--alpha", "1.0"]);
    let two = csv_rows(&dir.path().join("adapt_metrics.csv"));
    let one = csv_rows(&dir.path().join("single_stage_metrics.csv"));
    for (a, b) in two.iter().zip(&one) {
        assert_eq!(a[6..], b[6..]);
    }
}

#[test]
fn default_sweep_grids() {
    let dir = workspace();
    run_in(dir.path(), &["sweep"], &["--param", "alpha", "--M", "10"]);
    let rows = csv_rows(&dir.path().join("sweep_alpha.csv"));
    let params: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(params, ["0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8"]);
    run_in(dir.path(), &["sweep"], &["--param", "budget", "--k", "1"]);
    let rows = csv_rows(&dir.path().join("sweep_budget.csv"));
    let params: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(params, [100.0, 300.0, 500.0]);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (workspace(), workspace());
    for dir in [&a, &b] {
        run_in(dir.path(), &["single-stage"], &["--M", "10", "--peft", "bitfit"]);
        run_in(dir.path(), &["data", "gen"], &[]);
    }
    for name in ["single_stage_metrics.csv", "single_stage_curve_seed0.csv", "single_stage_curve_seed1.csv", "single_stage_seed0.ckpt", "data.json"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn output_directory_from_the_environment() {
    let dir = workspace();
    let cfg = config();
    let out = Command::new(env!("CARGO_BIN_EXE_fewshot"))
        .args(["data", "gen", "-c", cfg.to_str().unwrap()])
        .env("FEWSHOT_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data.json").exists());
}
