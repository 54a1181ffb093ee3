use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_crystal-drift"));
    c.env_remove("CRYSTAL_DRIFT_THREADS");
    c
}

fn run(args: &[&str], out: &Path) -> i32 {
    bin().args(args)
        .arg("--out")
        .arg(out)
        .status()
        .expect("binary runs")
        .code()
        .expect("exit code")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Every artifact other than the manifest, by name.
fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_writes_trajectory_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let code = run(
        &["simulate", "--n", "2", "--bc", "zero", "--betas", "1,2,3", "--horizon", "100", "--seed", "7"],
        tmp.path(),
    );
    assert_eq!(code, 0);
    let csv = fs::read_to_string(tmp.path().join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("time,site_1,site_2\n"));
    assert_eq!(csv.lines().count(), 102);
    let m = manifest(tmp.path());
    assert_eq!(m["subcommand"], "simulate");
    assert_eq!(m["config"]["seed"], 7);
    assert_eq!(m["config"]["horizon"], 100.0);
    assert!(m["timestamp"].is_u64());
    assert_eq!(m["artifacts"][0], "trajectory.csv");
}

#[test]
fn drift_check_example_three_on_path() {
    let tmp = tempfile::tempdir().unwrap();
    let code = run(&["drift-check", "--example", "3", "--graph", "path:3", "--betas", "0.2,0.4,0.8"], tmp.path());
    assert_eq!(code, 0);
    let rep: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("drift_report.json")).unwrap()).unwrap();
    assert_eq!(rep["report"]["conditions"]["passed"], true);
    assert_eq!(rep["report"]["conditions"]["exact"], true);
    assert!(tmp.path().join("kernel.csv").exists());
}

#[test]
fn drift_check_single_edge_is_certified() {
    let tmp = tempfile::tempdir().unwrap();
    let code = run(&["drift-check", "--example", "3", "--graph", "path:2"], tmp.path());
    assert_eq!(code, 0);
    let rep: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("drift_report.json")).unwrap()).unwrap();
    assert_eq!(rep["report"]["verdict"], "certified");
    assert_eq!(rep["report"]["constants"]["c"][0], 10);
}

#[test]
fn drift_check_user_constants_are_not_certified() {
    let tmp = tempfile::tempdir().unwrap();
    let code = run(
        &["drift-check", "--example", "1", "--n", "3", "--betas", "1,2,3", "--constants", "5,25", "--per-class", "10"],
        tmp.path(),
    );
    assert_eq!(code, 0);
    let rep: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("drift_report.json")).unwrap()).unwrap();
    assert_eq!(rep["report"]["verdict"], "non_certified");
}

#[test]
fn validation_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["simulate", "--n", "2"], tmp.path()), 1, "missing seed");
    assert_eq!(run(&["simulate", "--seed", "1", "--betas", "2,1,3"], tmp.path()), 1);
    assert_eq!(run(&["simulate", "--seed", "1", "--betas", "1,2"], tmp.path()), 1);
    assert_eq!(run(&["simulate", "--seed", "1", "--bc", "open"], tmp.path()), 1);
    assert_eq!(run(&["bogus"], tmp.path()), 1);
    assert_eq!(run(&["midpoint-check", "--seed", "1", "--betas", "1,2.5,3"], tmp.path()), 1);
    assert_eq!(run(&["martingale", "--seed", "1", "--alpha=-0.1"], tmp.path()), 1);
    assert_eq!(run(&["stationary", "--n", "3", "--threads", "0"], tmp.path()), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    // at t = 0.01 almost no column has moved, so no tail point is usable
    let code = run(&["tails", "--seed", "1", "--horizon", "0.01", "--replicas", "1000"], tmp.path());
    assert_eq!(code, 2);
}

#[test]
fn failed_checks_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let code = run(
        &["midpoint-check", "--seed", "1", "--betas", "1,2.5,3", "--unchecked", "--replicas", "3000",
          "--horizon", "100", "--permutations", "100"],
        tmp.path(),
    );
    assert_eq!(code, 3);
    assert_eq!(manifest(tmp.path())["exit_code"], 3);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "n = 3\nbetas = [1, 2, 3]\nhorizon = 20.0\nseed = 11\nsamples = 5\n").unwrap();
    let out = tmp.path().join("out");
    let code = run(&["simulate", "--config", cfg.to_str().unwrap(), "--samples", "3"], &out);
    assert_eq!(code, 0);
    let m = manifest(&out);
    assert_eq!(m["config"]["n"], 3);
    assert_eq!(m["config"]["seed"], 11);
    assert_eq!(m["config"]["samples"], 3);
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("time,site_1,site_2,site_3\n"));
    assert_eq!(csv.lines().count(), 4);

    fs::write(&cfg, "colour = 3\n").unwrap();
    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "1"], &out), 1);
}

#[test]
fn threads_flag_and_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let status = bin()
        .args(["stationary", "--n", "2", "--window", "5", "--out"])
        .arg(&a)
        .env("CRYSTAL_DRIFT_THREADS", "3")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(manifest(&a)["threads"], 3);
    let b = tmp.path().join("b");
    let status = bin()
        .args(["stationary", "--n", "2", "--window", "5", "--threads", "2", "--out"])
        .arg(&b)
        .env("CRYSTAL_DRIFT_THREADS", "3")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(manifest(&b)["threads"], 2);
    let bad = bin()
        .args(["stationary", "--n", "2", "--out"])
        .arg(tmp.path().join("c"))
        .env("CRYSTAL_DRIFT_THREADS", "many")
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(1));
}

#[test]
fn same_seed_same_bytes_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cmd = ["couple", "--seed", "5", "--replicas", "50", "--horizon", "20", "--restrict", "2"];
    let mut runs = Vec::new();
    for (k, threads) in ["1", "4", "4"].iter().enumerate() {
        let dir = tmp.path().join(format!("r{k}"));
        let mut args = cmd.to_vec();
        args.extend(["--threads", threads]);
        assert_eq!(run(&args, &dir), 0);
        runs.push(artifacts(&dir));
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[1], runs[2]);
}
