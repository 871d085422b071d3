//! End-to-end runs of the `thermoprop` binary.

use std::path::Path;
use std::process::{Command, Output};

fn thermoprop(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermoprop"))
        .args(args)
        .current_dir(cwd)
        .env_remove("THERMOPROP_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn only_subdir(dir: &Path) -> std::path::PathBuf {
    let entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries.into_iter().next().unwrap()
}

#[test]
fn costs_representative_is_in_band() {
    let tmp = tempfile::tempdir().unwrap();
    let o = thermoprop(&["costs", "--preset", "representative"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let adv = v["advantage"].as_f64().unwrap();
    assert!((1e3..=1e4).contains(&adv), "{adv}");
    assert_eq!(v["within_band"], true);
}

#[test]
fn costs_thermal_limit_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let o = thermoprop(&["costs", "--preset", "thermal-limit"], tmp.path());
    assert!(o.status.success());
    assert!(stderr(&o).contains("outside"), "{}", stderr(&o));
}

#[test]
fn validate_rejects_soft_spectrum() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{
        "partition": {"input_dim": 2, "hidden_dim": 2, "output_dim": 2, "module_sizes": [3, 3]},
        "base": {"a": 0.2},
        "couplings": [{"m": 0, "mp": 1, "k": 2, "seed": 1, "gain": 5.0}]
    }"#;
    std::fs::write(tmp.path().join("soft.json"), cfg).unwrap();
    let o = thermoprop(&["validate", "--config", "soft.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("lambda_min") || stderr(&o).contains("eigenvalue"), "{}", stderr(&o));
}

#[test]
fn validate_accepts_presets() {
    let tmp = tempfile::tempdir().unwrap();
    for p in ["paper-e1", "desk-small", "sweep-d8"] {
        let o = thermoprop(&["validate", "--preset", p], tmp.path());
        assert!(o.status.success(), "{p}: {}", stderr(&o));
        assert!(stdout(&o).contains("substrate ok"));
    }
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = thermoprop(&["e1", "--preset", "desk-small", "--out", "runs"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_subdir(&tmp.path().join("runs/e1"));
    let text = std::fs::read_to_string(dir.join("config.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["learning_rat"] = serde_json::json!(0.1);
    std::fs::write(tmp.path().join("bad.json"), v.to_string()).unwrap();
    let o = thermoprop(&["e1", "--config", "bad.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
    let o = thermoprop(&["e1", "--config", "missing.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = thermoprop(&["e1", "--preset", "nope"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn saved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let o = thermoprop(&["e1", "--preset", "desk-small", "--seeds", "0..3", "--out", "a"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let first = only_subdir(&tmp.path().join("a/e1"));
    let saved = first.join("config.json");
    let o = thermoprop(&["e1", "--config", saved.to_str().unwrap(), "--out", "b"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let second = only_subdir(&tmp.path().join("b/e1"));
    assert_eq!(first.file_name(), second.file_name());
    for f in ["table.csv", "table.json", "summary.txt", "config.json"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(second.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn e2_symmetric_slope_is_second_order() {
    let tmp = tempfile::tempdir().unwrap();
    let o = thermoprop(
        &["e2", "--preset", "desk-small", "--estimator", "symmetric", "--seeds", "0..4", "--out", "runs"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_subdir(&tmp.path().join("runs/e2"));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("table.json")).unwrap()).unwrap();
    let curves = v["curves"].as_array().unwrap();
    assert_eq!(curves.len(), 1);
    assert_eq!(curves[0]["estimator"], "symmetric");
    let slope = curves[0]["fit"]["slope"].as_f64().unwrap();
    assert!((1.9..=2.1).contains(&slope), "{slope}");
}

#[test]
fn diverging_training_exits_3_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let o = thermoprop(
        &["train", "--preset", "desk-small", "--steps", "50", "--learning-rate", "1e4", "--out", "runs"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverge"), "{}", stderr(&o));
    let train = tmp.path().join("runs/train");
    assert!(!train.exists() || std::fs::read_dir(&train).unwrap().next().is_none());
}

#[test]
fn seed_env_shifts_the_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_thermoprop"))
        .args(["e1", "--preset", "desk-small", "--out", "runs"])
        .current_dir(tmp.path())
        .env("THERMOPROP_SEED", "100")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = only_subdir(&tmp.path().join("runs/e1"));
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("config.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = v["seeds"].as_array().unwrap().iter().map(|s| s.as_u64().unwrap()).collect();
    assert_eq!(seeds, (100..110).collect::<Vec<_>>());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(thermoprop(&["e9"], tmp.path()).status.code(), Some(2));
    assert_eq!(thermoprop(&["e1", "--seeds", "x"], tmp.path()).status.code(), Some(2));
    assert_eq!(thermoprop(&["e1", "--jobs", "0", "--preset", "desk-small"], tmp.path()).status.code(), Some(2));
    assert!(thermoprop(&["--help"], tmp.path()).status.success());
}
