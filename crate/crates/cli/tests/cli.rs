use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn phenoscope(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phenoscope"))
        .args(args)
        .current_dir(dir)
        .env_remove("PHENOSCOPE_SEED")
        .env_remove("PHENOSCOPE_THREADS")
        .output()
        .unwrap()
}

const MANIFEST: &str = r#"{
  "n": 400,
  "seed": 12,
  "prevalence": 0.4,
  "effects": [
    {"feature": "pancreas_volume_mm3", "direction": "risk", "strength": 1.5},
    {"feature": "liver_intensity_median", "direction": "protective", "strength": 1.5}
  ]
}"#;

const CONFIG: &str = r#"{
  "seed": 3,
  "k_folds": 3,
  "forest": {"n_trees": 20},
  "umap": {"n_epochs": 100},
  "k_range": [2, 4]
}"#;

fn setup() -> TempDir {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("manifest.json"), MANIFEST).unwrap();
    fs::write(tmp.path().join("config.json"), CONFIG).unwrap();
    fs::write(tmp.path().join("floor.json"), r#"{"min_records": 1000}"#).unwrap();
    let out = phenoscope(&["simulate", "--manifest", "manifest.json", "--out", "data"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    tmp
}

#[test]
fn simulate_run_and_plot() {
    let tmp = setup();
    assert!(tmp.path().join("data/cohort.csv").is_file());
    assert!(tmp.path().join("data/truth.json").is_file());

    let out = phenoscope(
        &["run", "--input", "data/cohort.csv", "--config", "config.json", "--out", "run", "--cohorts", "all", "--threads", "2"],
        tmp.path(),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("all") && stdout.contains("AUC"));
    assert!(tmp.path().join("run/all/ranking.json").is_file());
    assert!(!tmp.path().join("run/lean").exists());

    let out = phenoscope(&["plot", "--report", "run"], tmp.path());
    assert!(out.status.success());
    assert!(tmp.path().join("run/all/shap_summary.svg").is_file());
    assert!(tmp.path().join("run/all/embedding_cluster.svg").is_file());
}

#[test]
fn seed_flag_and_env_override_the_config() {
    let tmp = setup();
    let report_seed = |dir: &str| -> u64 {
        let text = fs::read_to_string(tmp.path().join(dir).join("report.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["seed"].as_u64().unwrap()
    };
    let base = ["run", "--input", "data/cohort.csv", "--config", "floor.json"];
    let mut args = base.to_vec();
    args.extend(["--out", "a", "--seed", "99"]);
    assert!(phenoscope(&args, tmp.path()).status.code().is_some());
    assert_eq!(report_seed("a"), 99);

    let out = Command::new(env!("CARGO_BIN_EXE_phenoscope"))
        .args(base)
        .args(["--out", "b"])
        .current_dir(tmp.path())
        .env("PHENOSCOPE_SEED", "41")
        .output()
        .unwrap();
    assert!(out.status.code().is_some());
    assert_eq!(report_seed("b"), 41);
}

#[test]
fn skipped_cohort_exits_one() {
    let tmp = setup();
    let out = phenoscope(
        &["run", "--input", "data/cohort.csv", "--config", "floor.json", "--out", "run", "--cohorts", "obese,lean"],
        tmp.path(),
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("skipped"), "{stdout}");
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_input_exits_two() {
    let tmp = setup();
    fs::write(tmp.path().join("bad.json"), r#"{"k_folds": 1}"#).unwrap();
    let out = phenoscope(
        &["run", "--input", "data/cohort.csv", "--config", "bad.json", "--out", "run"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/k_folds"));

    fs::write(tmp.path().join("broken.csv"), "id,sex\nx,F\n").unwrap();
    let out = phenoscope(&["run", "--input", "broken.csv", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let out = phenoscope(&["run", "--input", "data/cohort.csv", "--out", "run", "--cohorts", "huge"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    fs::write(tmp.path().join("m.json"), r#"{"n": 100, "cluster_spec": [{"weight": 0.9}]}"#).unwrap();
    let out = phenoscope(&["simulate", "--manifest", "m.json", "--out", "sim"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/cluster_spec"));
}
