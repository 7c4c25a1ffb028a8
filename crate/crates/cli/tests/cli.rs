//! End-to-end checks of the `mtlab` binary: artifact layout, stdout
//! contract, reproducibility across reruns, and the JSON error channel.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(test: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(test);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(dir: &Path, method: &str) -> PathBuf {
    let text = format!(
        r#"
seed = 7

[dataset]
num_tasks = 2
num_samples = 64

[method]
name = "{method}"

[model]
conv_channels = [4]
head_hidden = 8

[train]
epochs = 2
batch_size = 16
"#
    );
    let path = dir.join(format!("{method}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn mtlab(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlab"))
        .env("MTLAB_OUT", out_root)
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout_of(output: &Output) -> String {
    assert!(
        output.status.success(),
        "exit {:?}, stderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout.clone()).unwrap()
}

#[test]
fn run_writes_all_artifacts_and_reports_gains() {
    let dir = scratch("run-artifacts");
    let config = tiny_config(&dir, "repmtl");
    let out = dir.join("out");
    let text = stdout_of(&mtlab(&out, &["run", "--config", config.to_str().unwrap()]));
    assert!(text.contains("method repmtl"), "missing summary: {text}");
    assert!(text.contains("delta_p_task"), "missing gains: {text}");
    let run_dir = out.join("run");
    for name in [
        "metrics.csv",
        "diagnostics.csv",
        "report.json",
        "config.toml",
        "model.mtck",
        "curves.svg",
    ] {
        assert!(run_dir.join(name).exists(), "missing artifact {name}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = scratch("run-rerun");
    let config = tiny_config(&dir, "ew");
    let (first, second) = (dir.join("first"), dir.join("second"));
    stdout_of(&mtlab(&first, &["run", "--config", config.to_str().unwrap()]));
    stdout_of(&mtlab(&second, &["run", "--config", config.to_str().unwrap()]));
    for name in ["metrics.csv", "report.json", "model.mtck", "curves.svg"] {
        let a = std::fs::read(first.join("run").join(name)).unwrap();
        let b = std::fs::read(second.join("run").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    // diagnostics.csv carries wall-clock timings; only its row structure
    // is stable across runs.
    let rows = |root: &Path| -> Vec<String> {
        std::fs::read_to_string(root.join("run").join("diagnostics.csv"))
            .unwrap()
            .lines()
            .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(rows(&first), rows(&second));
}

#[test]
fn analyze_prints_the_audit_as_json() {
    let dir = scratch("analyze");
    let config = tiny_config(&dir, "ew");
    let out = dir.join("out");
    stdout_of(&mtlab(&out, &["run", "--config", config.to_str().unwrap()]));
    let checkpoint = out.join("run").join("model.mtck");
    let text = stdout_of(&mtlab(&out, &["analyze", "--checkpoint", checkpoint.to_str().unwrap()]));
    let value: serde_json::Value = serde_json::from_str(&text).expect("audit is JSON");
    assert!(value.get("backbone").is_some());
    assert_eq!(value["heads"].as_array().unwrap().len(), 2);
    assert!(value.get("head_alpha_spread").is_some());
}

#[test]
fn repeat_aggregates_seeds() {
    let dir = scratch("repeat");
    let config = tiny_config(&dir, "ew");
    let out = dir.join("out");
    let text = stdout_of(&mtlab(
        &out,
        &["repeat", "--config", config.to_str().unwrap(), "--seeds", "2"],
    ));
    assert!(text.contains("seed 7:"), "missing per-seed line: {text}");
    assert!(text.contains("seed 8:"), "missing per-seed line: {text}");
    assert!(text.contains("delta_p_task mean"), "missing aggregate: {text}");
    let report = std::fs::read_to_string(out.join("run").join("repeat.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(value["seeds"].as_array().unwrap().len(), 2);
    assert!(value["delta_p_task"]["mean"].is_number());
}

#[test]
fn sweep_walks_the_grid() {
    let dir = scratch("sweep");
    let config = tiny_config(&dir, "repmtl");
    let grid = dir.join("grid.toml");
    std::fs::write(&grid, "parameter = \"lambda_tsr\"\nvalues = [0.0, 0.1]\nseeds = 1\n").unwrap();
    let out = dir.join("out");
    let text = stdout_of(&mtlab(
        &out,
        &[
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--grid",
            grid.to_str().unwrap(),
        ],
    ));
    assert!(text.contains("lambda_tsr = 0"), "missing grid point: {text}");
    assert!(text.contains("lambda_tsr = 0.1"), "missing grid point: {text}");
    let csv = std::fs::read_to_string(out.join("run").join("sweep-lambda_tsr.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per value:\n{csv}");
    assert!(out.join("run").join("sweep-lambda_tsr.json").exists());
    assert!(out.join("run").join("sweep-lambda_tsr.svg").exists());
}

#[test]
fn failures_exit_nonzero_with_a_json_error() {
    let dir = scratch("errors");
    let out = dir.join("out");

    let missing = mtlab(&out, &["run", "--config", dir.join("absent.toml").to_str().unwrap()]);
    assert!(!missing.status.success());
    let err: serde_json::Value =
        serde_json::from_slice(&missing.stderr).expect("stderr is one JSON object");
    assert!(err["error"]["kind"].is_string());
    assert!(err["error"]["message"].is_string());

    let bad = dir.join("bad.toml");
    std::fs::write(&bad, "[method]\nname = \"nonsense\"\n").unwrap();
    let invalid = mtlab(&out, &["run", "--config", bad.to_str().unwrap()]);
    assert!(!invalid.status.success());
    let err: serde_json::Value = serde_json::from_slice(&invalid.stderr).unwrap();
    let message = err["error"]["message"].as_str().unwrap();
    assert!(message.contains("nonsense"), "unhelpful message: {message}");
}
