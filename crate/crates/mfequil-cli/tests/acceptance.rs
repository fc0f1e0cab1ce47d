//! CLI-level acceptance: output determinism across reruns and thread counts
//! (bit-identical CSVs), plus the exit-code contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_mfequil")
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn small_clearing_config(dir: &Path) -> PathBuf {
    let text = r#"{
  "version": 1,
  "grid": { "horizon": 1.0, "steps": 4 },
  "market": {
    "stocks": 1, "common_dim": 1, "idio_dim": 1,
    "sigma": { "kind": "constant", "matrix": [[1.0]] },
    "lambda_lo": 0.5, "lambda_hi": 2.0
  },
  "population": {
    "gamma_lo": 1.0, "gamma_hi": 2.0,
    "atoms": [
      { "weight": 0.5, "initial_wealth": 0.0, "risk_aversion": 1.0,
        "liability": { "kind": "mixed_sign", "amplitude": 0.04 } },
      { "weight": 0.5, "initial_wealth": 0.0, "risk_aversion": 2.0,
        "liability": { "kind": "mixed_sign", "amplitude": 0.04 } }
    ]
  },
  "theta": { "kind": "mean_field" },
  "solver": { "tol": 1e-10, "max_iter": 100 },
  "clearing": { "n_list": [2, 8, 32], "outer_samples": 200 },
  "seed": 4242,
  "output_dir": "unused"
}"#;
    let path = dir.join("clearing.json");
    fs::write(&path, text).unwrap();
    path
}

fn run(command: &str, config: &Path, out: &Path, threads: usize) -> std::process::Output {
    Command::new(binary())
        .args([
            command,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            &threads.to_string(),
        ])
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("missing {name} in {dir:?}: {e}"))
}

fn manifest_hash(dir: &Path) -> String {
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(dir, "manifest.json")).unwrap();
    manifest["content_hash"].as_str().unwrap().to_string()
}

/// Criterion 12: identical configuration and seed produce bit-identical CSVs
/// across reruns and across thread counts.
#[test]
fn c12_deterministic_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_clearing_config(tmp.path());
    let runs = [
        (tmp.path().join("a"), 1usize),
        (tmp.path().join("b"), 1),
        (tmp.path().join("c"), 4),
    ];
    for (dir, threads) in &runs {
        let output = run("clearing-sweep", &config, dir, *threads);
        assert!(
            output.status.success(),
            "clearing-sweep failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    let mut pass = true;
    for name in ["clearing.csv", "theta.csv", "summary.json"] {
        let reference = read(&runs[0].0, name);
        for (dir, _) in &runs[1..] {
            pass &= read(dir, name) == reference;
        }
    }
    let reference_hash = manifest_hash(&runs[0].0);
    for (dir, _) in &runs[1..] {
        pass &= manifest_hash(dir) == reference_hash;
    }
    println!(
        "{} criterion 12 (determinism): rerun and thread-count variations bit-identical (hash {reference_hash})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion 12: outputs are not bit-identical");
}

#[test]
fn exit_code_contract() {
    let tmp = tempfile::tempdir().unwrap();

    // malformed config: parse error, exit 2
    let broken = tmp.path().join("broken.json");
    fs::write(&broken, "{ not json").unwrap();
    let output = run("equilibrium", &broken, &tmp.path().join("o1"), 1);
    assert_eq!(output.status.code(), Some(2));

    // assumption violation: lambda ordering, exit 3
    let bad_lambda = tmp.path().join("bad_lambda.json");
    fs::write(
        &bad_lambda,
        r#"{
  "version": 1,
  "grid": { "horizon": 1.0, "steps": 2 },
  "market": { "stocks": 1, "common_dim": 1, "idio_dim": 1,
    "sigma": { "kind": "constant", "matrix": [[1.0]] },
    "lambda_lo": 2.0, "lambda_hi": 0.5 },
  "population": { "gamma_lo": 1.0, "gamma_hi": 1.0, "atoms": [
    { "weight": 1.0, "initial_wealth": 0.0, "risk_aversion": 1.0,
      "liability": { "kind": "constant", "value": 0.0 } } ] },
  "seed": 1
}"#,
    )
    .unwrap();
    let output = run("equilibrium", &bad_lambda, &tmp.path().join("o2"), 1);
    assert_eq!(output.status.code(), Some(3));

    // oversized premium for the grid: numerical failure, exit 4
    let big_theta = tmp.path().join("big_theta.json");
    fs::write(
        &big_theta,
        r#"{
  "version": 1,
  "grid": { "horizon": 1.0, "steps": 1 },
  "market": { "stocks": 1, "common_dim": 1, "idio_dim": 1,
    "sigma": { "kind": "constant", "matrix": [[1.0]] },
    "lambda_lo": 0.5, "lambda_hi": 2.0 },
  "population": { "gamma_lo": 1.0, "gamma_hi": 1.0, "atoms": [
    { "weight": 1.0, "initial_wealth": 0.0, "risk_aversion": 1.0,
      "liability": { "kind": "constant", "value": 0.0 } } ] },
  "theta": { "kind": "constant_drift", "drift": [3.0] },
  "seed": 1
}"#,
    )
    .unwrap();
    let output = run("solve-agent", &big_theta, &tmp.path().join("o3"), 1);
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn minimal_config_yields_zero_premium() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("minimal.json");
    fs::write(
        &config,
        r#"{
  "version": 1,
  "grid": { "horizon": 1.0, "steps": 1 },
  "market": { "stocks": 1, "common_dim": 1, "idio_dim": 1,
    "sigma": { "kind": "constant", "matrix": [[1.0]] },
    "lambda_lo": 0.5, "lambda_hi": 2.0 },
  "population": { "gamma_lo": 1.0, "gamma_hi": 1.0, "atoms": [
    { "weight": 1.0, "initial_wealth": 0.0, "risk_aversion": 1.0,
      "liability": { "kind": "constant", "value": 0.0 } } ] },
  "theta": { "kind": "mean_field" },
  "seed": 1
}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let output = run("equilibrium", &config, &out, 1);
    assert!(output.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&read(&out, "summary.json")).unwrap();
    assert_eq!(summary["theta_mfg_t0"], serde_json::json!([0.0]));
}

#[test]
fn one_step_common_sign_premium_is_minus_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("one_step.json");
    fs::write(
        &config,
        r#"{
  "version": 1,
  "grid": { "horizon": 1.0, "steps": 1 },
  "market": { "stocks": 1, "common_dim": 1, "idio_dim": 1,
    "sigma": { "kind": "constant", "matrix": [[1.0]] },
    "lambda_lo": 0.5, "lambda_hi": 2.0 },
  "population": { "gamma_lo": 1.0, "gamma_hi": 1.0, "atoms": [
    { "weight": 1.0, "initial_wealth": 0.0, "risk_aversion": 1.0,
      "liability": { "kind": "additive", "common_amplitude": 1.0, "idio_amplitude": 0.0 } } ] },
  "theta": { "kind": "mean_field" },
  "seed": 1
}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let output = run("equilibrium", &config, &out, 1);
    assert!(output.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&read(&out, "summary.json")).unwrap();
    assert_eq!(summary["theta_mfg_t0"], serde_json::json!([-1.0]));
}

/// The shipped configurations load, run, and report the documented values.
#[test]
fn shipped_configs_run() {
    let tmp = tempfile::tempdir().unwrap();

    // additive equilibrium: fast path cross-checked against the fixed point
    let out = tmp.path().join("additive");
    let output = run("equilibrium", &repo_config("additive.json"), &out, 1);
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&read(&out, "summary.json")).unwrap();
    assert_eq!(summary["method"], "additive");
    let gap = summary["cross_check_gap"].as_f64().unwrap();
    assert!(gap <= 1e-10, "cross-check gap {gap}");

    // single agent: deterministic-premium closed form
    let out = tmp.path().join("single");
    let output = run("solve-agent", &repo_config("single_agent.json"), &out, 1);
    assert!(output.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&read(&out, "summary.json")).unwrap();
    let y0 = summary["y0"].as_f64().unwrap();
    assert!((y0 + 0.01).abs() <= 1e-15, "Y_0 = {y0}");

    // verification suite passes on its shipped scenario
    let out = tmp.path().join("verify");
    let output = run("verify", &repo_config("verify.json"), &out, 1);
    assert!(
        output.status.success(),
        "{}{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    let verification: serde_json::Value =
        serde_json::from_slice(&read(&out, "verification.json")).unwrap();
    assert_eq!(verification["all_pass"], true);
}
