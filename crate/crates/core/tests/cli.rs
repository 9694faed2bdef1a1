//! The binary end to end: exit codes and output files.

use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn run(dir: &Path, config: &str, extra: &[&str]) -> (i32, Option<Value>) {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_shadow-forge"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--quiet")
        .args(extra)
        .status()
        .unwrap();
    let summary = std::fs::read_to_string(out.join("summary.json")).ok().map(|s| serde_json::from_str(&s).unwrap());
    (status.code().unwrap(), summary)
}

const DIAGONAL: &str = r#"{
  "system": {"catalog": {"name": "discrete_diagonal", "params": {"horizon": 48}}},
  "nonlinearity": {"c": C},
  "pseudo_orbit": {"generate": PO}
}"#;

fn diagonal(c: &str, po: &str) -> String {
    DIAGONAL.replace("C", c).replace("PO", po)
}

#[test]
fn successful_shadow_exits_zero_and_writes_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = diagonal("0.02", r#"{"perturbation": {"kind": "noise", "magnitude": 1e-4, "seed": 9}}"#);
    let (code, summary) = run(dir.path(), &cfg, &["--oracle-check"]);
    assert_eq!(code, 0);
    let s = summary.unwrap();
    assert_eq!(s["overall"], true);
    assert!(s["oracle_sup_difference"].as_f64().unwrap() <= 1e-8);
    for f in ["report.json", "summary.json", "trajectory.csv", "pseudo_orbit.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
}

#[test]
fn exact_orbit_is_its_own_shadow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = diagonal("0.02", r#"{"x0": [0.5, 0.0]}"#);
    let (code, summary) = run(dir.path(), &cfg, &[]);
    assert_eq!(code, 0);
    let s = summary.unwrap();
    assert_eq!(s["delta"].as_f64().unwrap(), 0.0);
    assert_eq!(s["sup_distance"].as_f64().unwrap(), 0.0);
}

#[test]
fn bad_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = r#"{"system": {"catalog": {"name": "discrete_diagonal"}}, "colour": 3}"#;
    assert_eq!(run(dir.path(), unknown, &[]).0, 2);
    let no_such = r#"{"system": {"catalog": {"name": "no_such_system"}}}"#;
    assert_eq!(run(dir.path(), no_such, &[]).0, 2);
    let seedless = diagonal("0.02", r#"{"perturbation": {"kind": "noise", "magnitude": 1e-4}}"#);
    assert_eq!(run(dir.path(), &seedless, &[]).0, 2);
    assert_eq!(run(dir.path(), "not json", &[]).0, 2);
}

#[test]
fn large_lipschitz_constant_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    // q = 5c > 1
    let cfg = diagonal("0.5", r#"{"perturbation": {"kind": "impulse", "magnitude": 1e-3}}"#);
    let (code, summary) = run(dir.path(), &cfg, &[]);
    assert_eq!(code, 3);
    assert_eq!(summary.unwrap()["exit_code"], 3);
}
