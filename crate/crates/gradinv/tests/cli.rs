use std::fs;
use std::path::Path;
use std::process::Command;

use gradinv::report::{read_csv, ResultRow};

fn gradinv(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gradinv")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn small_config(out: &Path) -> String {
    format!(
        r#"{{
  "dataset": {{"kind": "synthetic", "n": 2, "size": 8, "seed": 4}},
  "schedule": {{"epochs": 2, "batch-size": 1, "update": "model-delta", "freeze": true}},
  "attack": {{"iterations": 20, "trace-every": 5, "tv-weight": 1e-5}},
  "multiepoch": {{"enabled": true, "pre-budget": 10}},
  "timing-probe": 5,
  "output": {:?}
}}"#,
        out.to_str().unwrap()
    )
}

#[test]
fn e2e_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &small_config(&out));
    let o = gradinv(&["e2e", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config.json",
        "results.csv",
        "traces.csv",
        "timing.csv",
        "matches.csv",
        "summary.json",
        "MANIFEST",
        "grid-single-e0.ppm",
        "grid-joint-e0.ppm",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest = fs::read_to_string(out.join("MANIFEST")).unwrap();
    assert!(manifest.ends_with("done\n"), "{manifest}");
    let rows: Vec<ResultRow> = read_csv(&out.join("results.csv")).unwrap();
    // Two singles per epoch plus one joint chain per first-epoch sample.
    assert_eq!(rows.len(), 6);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("joint-e0: mean PSNR"), "{stdout}");
}

#[test]
fn staged_commands_agree_with_e2e() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &small_config(&out).replace("\"enabled\": true", "\"enabled\": false"));
    assert!(gradinv(&["simulate", "--config", &cfg]).status.success());
    let obs = out.join("observations.json");
    let obs = obs.to_str().unwrap();
    assert!(gradinv(&["attack", "--config", &cfg, "--observations", obs]).status.success());
    let recs = out.join("reconstructions.json");
    let o = gradinv(&["evaluate", "--config", &cfg, "--observations", obs, "--reconstructions", recs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let staged: Vec<ResultRow> = read_csv(&out.join("results.csv")).unwrap();

    assert!(gradinv(&["e2e", "--config", &cfg]).status.success());
    let whole: Vec<ResultRow> = read_csv(&out.join("results.csv")).unwrap();
    assert_eq!(staged, whole);
}

#[test]
fn match_command_reports_rates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &small_config(&out));
    assert!(gradinv(&["simulate", "--config", &cfg]).status.success());
    let obs = out.join("observations.json");
    let o = gradinv(&["match", "--config", &cfg, "--observations", obs.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("epochs 0 -> 1: success rate"));
    assert!(out.join("matches.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"dataset": {"kind": "synthetic", "n": 2, "size": 8}, "attack": {"beta": "high"}}"#,
        r#"{"dataset": {"kind": "synthetic", "n": 2, "size": 8}, "bogus": 1}"#,
        r#"{"dataset": {"kind": "synthetic", "n": 2, "size": 8}, "schedule": {"lr": -1}}"#,
        r#"{"dataset": {"kind": "synthetic", "n": 2, "size": 8}, "model": {"name": "vgg"}}"#,
    ];
    for body in cases {
        let cfg = write_config(dir.path(), body);
        let o = gradinv(&["e2e", "--config", &cfg]);
        assert_eq!(o.status.code(), Some(2), "{body}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = gradinv(&["e2e", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failed_stage_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let body = format!(
        r#"{{"dataset": {{"kind": "cifar10", "path": "/nonexistent/data_batch_1.bin"}}, "output": {:?}}}"#,
        out.to_str().unwrap()
    );
    let cfg = write_config(dir.path(), &body);
    let o = gradinv(&["e2e", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    let manifest = fs::read_to_string(out.join("MANIFEST")).unwrap();
    assert!(manifest.starts_with("config: ok\nsimulate: failed:"), "{manifest}");
    assert!(out.join("config.json").exists());
    assert!(!out.join("results.csv").exists());
}

#[test]
fn selftest_passes() {
    let o = gradinv(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
