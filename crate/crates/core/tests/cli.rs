mod common;

use std::process::{Command, Output};

use common::scenarios_dir;

fn pdcguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdcguard")).args(args).output().expect("binary runs")
}

fn scenario_path(name: &str) -> String {
    scenarios_dir().join(format!("{name}.toml")).display().to_string()
}

#[test]
fn list_scenarios_prints_every_file() {
    let dir = scenarios_dir().display().to_string();
    let out = pdcguard(&["list-scenarios", "--dir", &dir]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().next().unwrap().starts_with("case1_no_attack\t"));
}

#[test]
fn verify_passes_shipped_scenario() {
    let out = pdcguard(&["verify", "--scenario", &scenario_path("case3_alg1")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
    assert!(text.contains("identified"));
}

#[test]
fn run_writes_csv_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = pdcguard(&[
        "run",
        "--scenario",
        &scenario_path("case8_alg4"),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["status"], "confirmed");
    assert_eq!(summary["identified"], serde_json::json!([2, 3]));
    let csv = std::fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(csv.starts_with("iteration,pdc_id,variable,coordinate_index,value\n"));
    assert!(out_dir.join("report.json").exists());
}

#[test]
fn run_honours_format_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdcguard(&[
        "run",
        "--scenario",
        &scenario_path("case1_no_attack"),
        "--out",
        dir.path().to_str().unwrap(),
        "--format",
        "json",
        "--iters",
        "7",
        "--seed",
        "21",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace["seed"], 21);
    assert_eq!(trace["records"].as_array().unwrap().len(), 7);
    assert!(!dir.path().join("trace.csv").exists());
}

#[test]
fn missing_scenario_reports_json_error() {
    let out = pdcguard(&["run", "--scenario", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("/nonexistent/scenario.toml"));
}

#[test]
fn malformed_scenario_reports_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"bad\"\nseed = -1\n").unwrap();
    let out = pdcguard(&["verify", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn oversized_seed_is_rejected() {
    let out = pdcguard(&["run", "--scenario", &scenario_path("case1_no_attack"), "--seed", "18446744073709551615"]);
    assert!(!out.status.success());
}
