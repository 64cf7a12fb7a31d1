use std::path::Path;
use std::process::{Command, Output};

fn cmsmc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmsmc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"{
    "dataset": {"train_per_behavior": 2, "validation_per_behavior": 1, "test_per_behavior": 1, "length": 50},
    "models": ["ssm", "ekf", "ukf"],
    "cloud_samples": 10,
    "prediction": {"first_origin": 10, "origin_stride": 10}
}"#;

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn generate_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cmsmc(&["generate", "--config", &cfg, "--out", "data", "--seed", "5"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let test = std::fs::read_to_string(dir.path().join("data/test.csv")).unwrap();
    assert!(test.starts_with("trajectory_id,step,x1,x2,x3,z1,z2,behavior,stage,sub_stage"));
    assert_eq!(test.lines().count(), 1 + 4 * 50);
    assert!(dir.path().join("data/train.csv").exists());
}

#[test]
fn track_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cmsmc(
        &["track", "--config", &cfg, "--out", "run", "--particles", "50", "--strategy", "rejection"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("SSM") && stdout.contains("UKF"));
    let mae = std::fs::read_to_string(dir.path().join("run/mae.csv")).unwrap();
    assert_eq!(mae.lines().count(), 1 + 3 * 3);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["trajectories"].as_array().unwrap().len(), 4);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn predict_reports_ade() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cmsmc(&["predict", "--config", &cfg, "--horizon", "5", "--models", "ekf,ssm"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ade = std::fs::read_to_string(dir.path().join("out/ade.csv")).unwrap();
    assert!(ade.lines().nth(1).unwrap().starts_with("EKF,5,"));
}

#[test]
fn train_saves_requested_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = cmsmc(
        &["train", "--config", &cfg, "--recognizer", "gnb", "--out", "models"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("models/recognizer.json").exists());
    assert!(!dir.path().join("models/evolution-cgmr.json").exists());
}

#[test]
fn scenario_counts_passing_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmsmc(&["scenario", "crossing", "--seeds", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("crossing: 2/2"));
    assert!(dir.path().join("out/scenario-crossing.json").exists());
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"particle_count": 3}"#).unwrap();
    let out = cmsmc(&["track", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = cmsmc(&["track", "--config", "missing.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = cmsmc(&["track", "--particles", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_stop_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    // A single particle has an effective sample size of 1, which always alerts.
    let out = cmsmc(
        &["track", "--config", &cfg, "--particles", "1", "--on-divergence", "stop", "--models", "ssm"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}
