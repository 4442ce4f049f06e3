//! End-to-end runs of the command-line front end.

use std::fs;
use std::path::Path;
use std::process::Command;

fn qsdlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qsdlab"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, format!("output_dir = \"out\"\n{body}\n")).unwrap();
    path
}

const SMALL_MC: &str = "[mc]\nn = 4000\ndt = 2e-3\nt_max = 4.0\nseed = 5\nconditioned_n = 400\nconditioned_t_max = 8.0\n";

#[test]
fn example_one_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("drift = \"const:1.0\"\ncommands = [\"classify\", \"lambda-c\", \"qsd\", \"rpositive\", \"simulate\", \"report\"]\n{SMALL_MC}"),
    );
    let out = qsdlab().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("out/report.txt")).unwrap();
    assert!(report.contains("λ_c ≈ 0.500000"));
    assert!(report.contains("minimal QSD matches a²ye^{−ay}"));
    assert!(report.contains("criterion not satisfied"));
    for f in ["classification.csv", "qsd_0.500000.csv", "survival.csv", "snapshots.csv", "plots/qsd_densities.svg", "plots/survival.svg", "plots/criterion.svg"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
    let survival = fs::read_to_string(dir.path().join("out/survival.csv")).unwrap();
    assert!(survival.starts_with("t,survivors,fraction\n0.0000000000000000e0,4000,1.0000000000000000e0\n"));
}

#[test]
fn example_two_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "drift = \"linear:1.0\"\ncommands = [\"qsd\", \"rpositive\"]\nlambda_values = [\"lambda_c\"]");
    let out = qsdlab().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("λ_c ≈ 1.000000"));
    assert!(report.contains("R-positive"));
    assert!(report.contains("minimal QSD matches 2aye^{−ay²}"));
}

#[test]
fn negative_drift_has_no_qsd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "drift = \"const:-1.0\"\ncommands = [\"classify\", \"lambda-c\", \"qsd\"]");
    let out = qsdlab().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout).unwrap().contains("no QSD exists (δ = ∞)"));
}

#[test]
fn validate_zero_drift_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("drift = \"const:0\"\ncommands = [\"classify\"]\n{SMALL_MC}"));
    let out = qsdlab().arg("validate").arg(&cfg).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("PASS existence (negative control)"));
    assert!(text.contains("PASS zero-drift survival"));
}

#[test]
fn validate_example_one_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("drift = \"const:1.0\"\ncommands = [\"classify\"]\n{SMALL_MC}"));
    let out = qsdlab().arg("validate").arg(&cfg).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.matches("PASS").count() >= 10);
    assert!(dir.path().join("out/validation.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "drift = \"const:1\"\ncommands = [\"classify\"]\nunknown = 3");
    let out = qsdlab().arg("run").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("config error"));
    let no_seed = write_config(dir.path(), "drift = \"const:1\"\ncommands = [\"simulate\"]\n[mc]\nn = 10");
    assert_eq!(qsdlab().arg("run").arg(&no_seed).output().unwrap().status.code(), Some(1));
    let undecided = qsdlab().args(["classify", "--drift", "0.505/(1+x)"]).output().unwrap();
    assert_eq!(undecided.status.code(), Some(2));
    let ok = qsdlab().args(["classify", "--drift", "const:2"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8(ok.stdout).unwrap().contains("lambda_c: [1.99"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("drift = \"linear:1\"\ncommands = [\"simulate\", \"qsd\", \"report\"]\n{SMALL_MC}"));
    let snapshot = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(d)
            .unwrap()
            .flatten()
            .filter(|e| e.path().is_file())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
            .collect();
        v.sort();
        v
    };
    qsdlab().arg("run").arg(&cfg).output().unwrap();
    let first = snapshot(&dir.path().join("out"));
    qsdlab().arg("run").arg(&cfg).env("QSDLAB_THREADS", "1").output().unwrap();
    assert_eq!(first, snapshot(&dir.path().join("out")));
}
