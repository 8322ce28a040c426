mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use phenoscope::dataset::{parse_cohort, stratify_by_bmi, write_cohort};
use phenoscope::embed::UmapConfig;
use phenoscope::report::{
    analyze_cohort, render_plots, run_pipeline, simulate, skip_reason, CohortStatus, PipelineConfig, PipelineError,
    RunReport,
};
use phenoscope::synth::generate_cohort;
use phenoscope::{CohortName, FeatureSchema, ForestConfig};
use serde_json::Value;
use tempfile::TempDir;

fn quick_config() -> PipelineConfig {
    PipelineConfig {
        seed: 17,
        k_folds: 3,
        forest: ForestConfig {
            n_trees: 30,
            ..ForestConfig::default()
        },
        umap: UmapConfig {
            n_epochs: 150,
            ..UmapConfig::default()
        },
        k_range: [2, 5],
        cohorts: vec![CohortName::All, CohortName::Lean],
        ..PipelineConfig::default()
    }
}

fn write_input(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let (cohort, _) = generate_cohort(&common::planted_manifest(n, 1.5, seed)).unwrap();
    let path = dir.join("cohort.csv");
    write_cohort(&cohort, fs::File::create(&path).unwrap()).unwrap();
    path
}

struct Run {
    _tmp: TempDir,
    input: PathBuf,
    out: PathBuf,
    report: RunReport,
}

fn shared_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = TempDir::new().unwrap();
        let input = write_input(tmp.path(), 600, 61);
        let out = tmp.path().join("out");
        let report = run_pipeline(&quick_config(), &input, &out).unwrap();
        Run {
            _tmp: tmp,
            input,
            out,
            report,
        }
    })
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_every_artifact_with_its_schema() {
    let run = shared_run();
    assert!(run.report.all_ok());
    assert_eq!(run.report.exit_code(), 0);
    assert_eq!(RunReport::load(&run.out).unwrap(), run.report);
    let dir = run.out.join("all");
    let expected = [
        "auc.json",
        "folds.csv",
        "shap.csv",
        "ranking.json",
        "shap_top.csv",
        "logit_table.csv",
        "screen.json",
        "concordance.json",
        "embedding.csv",
        "clusters.json",
    ];
    for f in expected {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert_eq!(run.report.cohorts[0].files.len(), expected.len());
    assert_eq!(header(&dir.join("folds.csv")), ["id", "fold", "label", "predicted_probability"]);
    assert_eq!(header(&dir.join("shap.csv")).len(), 94);
    assert_eq!(header(&dir.join("shap_top.csv")), ["rank", "feature", "id", "shap", "value"]);
    assert_eq!(
        header(&dir.join("embedding.csv")),
        ["id", "x", "y", "cluster", "label", "predicted_probability", "age", "sex"]
    );
    let auc = json(&dir.join("auc.json"));
    assert_eq!(auc["fold_auc"].as_array().unwrap().len(), 3);
    assert!(auc["display"].as_str().unwrap().contains(" ± "));
    assert_eq!(json(&dir.join("ranking.json"))["entries"].as_array().unwrap().len(), 20);
    let clusters = json(&dir.join("clusters.json"));
    let k = clusters["k"].as_u64().unwrap() as usize;
    assert_eq!(clusters["clusters"].as_array().unwrap().len(), k);
    let provenance = fs::read_to_string(run.out.join("provenance.txt")).unwrap();
    assert!(provenance.contains("seed: 17"));
}

#[test]
fn logit_table_matches_the_statistics_bit_for_bit() {
    let run = shared_run();
    let data = parse_cohort(fs::File::open(&run.input).unwrap(), &FeatureSchema::default()).unwrap();
    let strata = stratify_by_bmi(&data).unwrap();
    let analysis = analyze_cohort(strata.get(CohortName::All), &quick_config()).unwrap();
    let mut reader = csv::Reader::from_path(run.out.join("all/logit_table.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), analysis.screen.results.len());
    for (row, r) in rows.iter().zip(&analysis.screen.results) {
        assert_eq!(&row[0], r.feature);
        assert_eq!(row[1].parse::<f64>().unwrap().to_bits(), r.odds_ratio.to_bits());
        assert_eq!(row[5].parse::<f64>().unwrap().to_bits(), r.p_value.to_bits());
        assert_eq!(row[6].parse::<f64>().unwrap().to_bits(), r.p_fdr.to_bits());
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let run = shared_run();
    let echoed = RunReport::load(&run.out).unwrap().config;
    assert_eq!(echoed.input.as_deref(), Some(run.input.as_path()));
    let tmp = TempDir::new().unwrap();
    let again = PipelineConfig {
        cohorts: vec![CohortName::Lean],
        ..echoed.clone()
    };
    run_pipeline(&again, echoed.input.as_ref().unwrap(), tmp.path()).unwrap();
    for f in ["ranking.json", "embedding.csv", "logit_table.csv"] {
        assert_eq!(
            fs::read(run.out.join("lean").join(f)).unwrap(),
            fs::read(tmp.path().join("lean").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn plots_are_rendered_for_completed_cohorts() {
    let run = shared_run();
    let summary = render_plots(&run.out).unwrap();
    assert_eq!(summary.written.len(), 2 * 6);
    assert!(summary.notes.is_empty());
    for f in &summary.written {
        let svg = fs::read_to_string(run.out.join(f)).unwrap();
        assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"), "{f}");
    }
}

#[test]
fn small_or_single_class_cohorts_are_skipped() {
    let tmp = TempDir::new().unwrap();
    let input = write_input(tmp.path(), 120, 5);
    let config = PipelineConfig {
        cohorts: vec![CohortName::Obese],
        ..quick_config()
    };
    let report = run_pipeline(&config, &input, &tmp.path().join("out")).unwrap();
    assert_eq!(report.cohorts[0].status, CohortStatus::Skipped);
    assert!(report.cohorts[0].reason.as_ref().unwrap().contains("below the floor"));
    assert_eq!(report.exit_code(), 1);
    assert!(render_plots(&tmp.path().join("out")).unwrap().written.is_empty());

    let (mut cohort, _) = generate_cohort(&common::planted_manifest(150, 1.0, 2)).unwrap();
    assert_eq!(skip_reason(&cohort, 100), None);
    cohort.records.iter_mut().for_each(|r| r.label = true);
    assert_eq!(skip_reason(&cohort, 100).unwrap(), "only one label class present");
}

#[test]
fn invalid_inputs_map_to_exit_code_two() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "id,sex,age\n1,F,40\n").unwrap();
    let err = run_pipeline(&quick_config(), &bad, &tmp.path().join("out")).unwrap_err();
    assert!(matches!(err, PipelineError::Dataset { .. }));
    assert_eq!(err.exit_code(), 2);
    let missing = run_pipeline(&quick_config(), &tmp.path().join("nope.csv"), tmp.path()).unwrap_err();
    assert_eq!(missing.exit_code(), 1);
    let manifest = tmp.path().join("m.json");
    fs::write(&manifest, r#"{"n": 5}"#).unwrap();
    assert_eq!(simulate(&manifest, tmp.path()).unwrap_err().exit_code(), 2);
}

#[test]
fn simulate_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let manifest = tmp.path().join("m.json");
    fs::write(
        &manifest,
        r#"{"n": 300, "seed": 3, "effects": [{"feature": "pancreas_volume_mm3", "direction": "risk", "strength": 1.0}]}"#,
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate(&manifest, &a).unwrap();
    simulate(&manifest, &b).unwrap();
    for f in ["cohort.csv", "truth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_eq!(header(&a.join("cohort.csv")).len(), 94);
}

#[test]
fn shuffled_labels_rarely_reach_significance() {
    let (mut cohort, _) = generate_cohort(&common::planted_manifest(600, 1.5, 71)).unwrap();
    let labels = cohort.labels();
    let n = labels.len();
    for (i, r) in cohort.records.iter_mut().enumerate() {
        r.label = labels[(i * 389 + 7) % n];
    }
    let analysis = analyze_cohort(&cohort, &quick_config()).unwrap();
    assert!(analysis.concordance.summary.significant <= 2, "{:?}", analysis.concordance.summary);
}
