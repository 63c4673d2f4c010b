use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn brownflow(args: &[&str], dir: &Path, env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_brownflow"));
    c.args(args).current_dir(dir).env_remove("BROWNFLOW_THREADS");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

const SMALL: &str = "experiment = \"flow_pm\"\nseed = 11\noutput_dir = \"out\"\n[params]\nx0 = [-0.5, 0.5]\nreplicas = 200\ndt = 0.01\n";

#[test]
fn verify_suite_passes_and_lists_reports() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "v.toml", "experiment = \"verify_suite\"\nseed = 1\n");
    let out = brownflow(&["run", &cfg, "--output-dir", "suite"], tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("suite/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["pass"], true);
    let reports = manifest["reports"].as_array().unwrap();
    assert!(reports.len() >= 5);
    assert!(String::from_utf8_lossy(&out.stdout).lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn missing_seed_is_named() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "experiment = \"flow_pm\"\n[params]\nx0 = [0.0]\n");
    let out = brownflow(&["run", &cfg], tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    assert!(!tmp.path().join("brownflow_out").exists());
}

#[test]
fn misspelt_key_gets_suggestion() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "experiment = \"flow_pm\"\nseed = 1\n[params]\nx0 = [0.0]\ndts = 0.01\n");
    let out = brownflow(&["validate", &cfg], tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dts") && err.contains("did you mean") && err.contains("dt"), "{err}");
}

#[test]
fn validate_echoes_defaults() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", "experiment = \"flow_pm\"\nseed = 1\n[params]\nx0 = [0.0]\n");
    let out = brownflow(&["validate", &cfg], tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(0));
    let echo = String::from_utf8_lossy(&out.stdout);
    assert!(echo.contains("replicas") && echo.contains("horizon") && echo.contains("dt"), "{echo}");
}

#[test]
fn reruns_are_byte_identical_across_threads() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let a = brownflow(&["run", &cfg], tmp.path(), &[("BROWNFLOW_THREADS", "1")]);
    assert!(a.status.code().is_some_and(|c| c <= 1));
    let first = read_dir(&tmp.path().join("out"));
    assert!(first.iter().any(|(n, _)| n == "terminal.csv"));
    let b = brownflow(&["run", &cfg, "--threads", "3"], tmp.path(), &[]);
    assert_eq!(a.status.code(), b.status.code());
    assert_eq!(read_dir(&tmp.path().join("out")), first);
}

#[test]
fn seed_override_changes_samples() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    brownflow(&["run", &cfg, "--output-dir", "a"], tmp.path(), &[]);
    brownflow(&["run", &cfg, "--output-dir", "b", "--seed-override", "12"], tmp.path(), &[]);
    let term = |d: &str| std::fs::read(tmp.path().join(d).join("terminal.csv")).unwrap();
    assert_ne!(term("a"), term("b"));
    let manifest = std::fs::read_to_string(tmp.path().join("b/manifest.json")).unwrap();
    assert!(manifest.contains("seed = 12"), "{manifest}");
}

#[test]
fn bad_thread_env_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let out = brownflow(&["run", &cfg], tmp.path(), &[("BROWNFLOW_THREADS", "many")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    write(tmp.path(), "blocker", "");
    let out = brownflow(&["run", &cfg, "--output-dir", "blocker/out"], tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn failing_check_exits_one() {
    let tmp = TempDir::new().unwrap();
    // crossings counted at a coarse level badly underestimate the local time
    let cfg = write(
        tmp.path(),
        "w.toml",
        "experiment = \"wedge_laplace\"\nseed = 3\n[params]\nreplicas = 4000\ndt = 1e-4\nalpha = [2.0]\neps = [0.4]\n",
    );
    let out = brownflow(&["run", &cfg], tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL laplace_identity"));
    assert!(tmp.path().join("brownflow_out/laplace.csv").exists());
}
