//! Pipeline orchestration, configuration and on-disk artifacts.
//!
//! Each requested cohort runs the full stage chain independently and writes
//! into its own directory below the output root. A failed or skipped cohort
//! is recorded in `report.json` and the remaining cohorts still run.

mod plot;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    parse_cohort, standardize_features, stratified_kfold, stratify_by_bmi, write_cohort, Cohort, CohortName,
    DatasetError, FeatureSchema, Sex,
};
use crate::embed::{select_k, umap_embed, Embedding, KSelection, UmapConfig};
use crate::forest::{cross_validate, CvResult, ForestConfig};
use crate::phenotype::{ovr_signature, ClusterSignature};
use crate::seed::derive_seed;
use crate::shap::{concat_fold_shap, rank_features_among, FeatureRanking, ShapMatrix};
use crate::stats::{concordance, univariate_screen, write_logit_table, ConcordanceTable, ScreenResult};
use crate::synth::{generate_cohort, SynthError, SynthManifest};

pub use plot::{render_plots, PlotSummary};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Dataset {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
    #[error("invalid config at {pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

impl PipelineError {
    /// Process exit code: 2 for invalid input, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Dataset { .. } | PipelineError::Config { .. } | PipelineError::Synth(_) => 2,
            PipelineError::Io { .. } | PipelineError::Artifact { .. } => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn artifact_err(path: &Path, e: impl ToString) -> PipelineError {
    PipelineError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn default_k_folds() -> usize {
    10
}
fn default_top_k() -> usize {
    20
}
fn default_k_range() -> [usize; 2] {
    [2, 10]
}
fn default_alpha() -> f64 {
    0.05
}
fn default_cohorts() -> Vec<CohortName> {
    CohortName::ALL.to_vec()
}
fn default_min_records() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default)]
    pub umap: UmapConfig,
    /// Inclusive range of cluster counts scanned by silhouette.
    #[serde(default = "default_k_range")]
    pub k_range: [usize; 2],
    #[serde(default = "default_alpha")]
    pub fdr_alpha: f64,
    #[serde(default = "default_cohorts")]
    pub cohorts: Vec<CohortName>,
    /// Cohorts with fewer records are skipped.
    #[serde(default = "default_min_records")]
    pub min_records: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            seed: 0,
            k_folds: default_k_folds(),
            top_k: default_top_k(),
            forest: ForestConfig::default(),
            umap: UmapConfig::default(),
            k_range: default_k_range(),
            fdr_alpha: default_alpha(),
            cohorts: default_cohorts(),
            min_records: default_min_records(),
        }
    }
}

fn config_err(pointer: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let pointer = if path == "." {
                String::new()
            } else {
                format!("/{}", path.replace('.', "/"))
            };
            config_err(&pointer, e.inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let inputs = FeatureSchema::default().input_names().len();
        if self.k_folds < 2 {
            return Err(config_err("/k_folds", "must be >= 2"));
        }
        if self.top_k == 0 || self.top_k > inputs {
            return Err(config_err("/top_k", format!("must be in 1..={inputs}")));
        }
        let [lo, hi] = self.k_range;
        if lo < 2 || hi < lo {
            return Err(config_err("/k_range", "need 2 <= min <= max"));
        }
        if !(self.fdr_alpha > 0.0 && self.fdr_alpha < 1.0) {
            return Err(config_err("/fdr_alpha", "must be in (0, 1)"));
        }
        if self.cohorts.is_empty() {
            return Err(config_err("/cohorts", "at least one cohort required"));
        }
        self.forest.validate().map_err(|e| config_err("/forest", e.to_string()))?;
        self.umap.validate().map_err(|e| config_err("/umap", e.to_string()))?;
        Ok(())
    }

    /// Seed for one stage of one cohort.
    pub fn stage_seed(&self, stage: &str, cohort: CohortName) -> u64 {
        derive_seed(self.seed, &[stage, cohort.as_str()])
    }
}

/// In-memory results of one cohort's stage chain.
#[derive(Debug, Clone)]
pub struct CohortAnalysis {
    pub cohort: CohortName,
    pub cv: CvResult,
    pub shap: ShapMatrix,
    pub ranking: FeatureRanking,
    pub screen: ScreenResult,
    pub concordance: ConcordanceTable,
    pub embedding: Embedding,
    pub clustering: KSelection,
    pub signatures: Vec<ClusterSignature>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

impl StageFailure {
    fn at(stage: &str) -> impl FnOnce(String) -> StageFailure + '_ {
        move |message| StageFailure {
            stage: stage.to_string(),
            message,
        }
    }
}

#[derive(Debug, Clone)]
pub enum CohortOutcome {
    Done(Box<CohortAnalysis>),
    Skipped(String),
    Failed(StageFailure),
}

/// Why a cohort cannot be modeled, if it cannot.
pub fn skip_reason(cohort: &Cohort, min_records: usize) -> Option<String> {
    if cohort.len() < min_records {
        return Some(format!("{} records, below the floor of {min_records}", cohort.len()));
    }
    let cases = cohort.n_cases();
    if cases == 0 || cases == cohort.len() {
        return Some("only one label class present".into());
    }
    None
}

macro_rules! stage {
    ($name:expr, $e:expr) => {
        $e.map_err(|e| StageFailure::at($name)(e.to_string()))?
    };
}

/// Runs every analysis stage on one cohort without touching the filesystem.
pub fn analyze_cohort(cohort: &Cohort, config: &PipelineConfig) -> Result<CohortAnalysis, StageFailure> {
    let name = cohort.name;
    let folds = stage!("folds", stratified_kfold(cohort, config.k_folds, config.stage_seed("folds", name)));
    let forest = config.forest.with_seed(config.stage_seed("forest", name));
    let cv = stage!("cross_validate", cross_validate(cohort, &forest, &folds));
    let shap = stage!("shap", concat_fold_shap(&cv, cohort));
    let (standardized, _) = stage!("standardize", standardize_features(cohort));
    let ranking = stage!(
        "rank",
        rank_features_among(&shap, config.top_k, |n| !standardized.is_constant(n))
    );
    let screen = univariate_screen(&standardized, &ranking, config.fdr_alpha);
    let concordance = stage!("concordance", concordance(&screen.results, &ranking));

    let profiles = stage!("profiles", shap.select(&ranking.names()));
    let umap = UmapConfig {
        seed: config.stage_seed("umap", name),
        ..config.umap.clone()
    };
    let embedding = stage!("umap", umap_embed(&shap.ids, &profiles, &umap));
    let clustering = stage!(
        "select_k",
        select_k(
            &embedding.coords,
            config.k_range[0],
            config.k_range[1],
            config.stage_seed("kmeans", name)
        )
    );
    let labels = &clustering.model.labels;
    let mut signatures = Vec::with_capacity(clustering.model.k);
    for c in 0..clustering.model.k {
        let ovr = config
            .forest
            .with_seed(derive_seed(config.seed, &["ovr", name.as_str(), &c.to_string()]));
        signatures.push(stage!("ovr_signature", ovr_signature(cohort, labels, c, &embedding, &ovr)));
    }
    Ok(CohortAnalysis {
        cohort: name,
        cv,
        shap,
        ranking,
        screen,
        concordance,
        embedding,
        clustering,
        signatures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub fold_auc: Vec<Option<f64>>,
    pub mean: f64,
    pub sd: f64,
    /// `mean ± sd` to two decimals.
    pub display: String,
    pub undefined_folds: usize,
}

impl AucSummary {
    fn of(cv: &CvResult) -> Self {
        Self {
            fold_auc: cv.fold_auc.clone(),
            mean: cv.mean_auc,
            sd: cv.sd_auc,
            display: cv.summary(),
            undefined_folds: cv.undefined_folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSummary {
    pub k: usize,
    pub silhouette: Option<f64>,
    pub scores: Vec<(usize, f64)>,
    pub warning: Option<String>,
    pub degenerate_embedding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub cohort: CohortName,
    pub status: CohortStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    pub n_records: usize,
    pub n_cases: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<AucSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranking: Option<FeatureRanking>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concordance: Option<crate::stats::ConcordanceSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusteringSummary>,
    /// Artifact paths relative to the output root.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub software: String,
    pub version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub cohorts: Vec<CohortReport>,
}

impl RunReport {
    pub fn all_ok(&self) -> bool {
        self.cohorts.iter().all(|c| c.status == CohortStatus::Ok)
    }

    /// 0 when every requested cohort completed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.all_ok() {
            0
        } else {
            1
        }
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| artifact_err(&path, e))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| artifact_err(path, e))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(|e| artifact_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| artifact_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn sex_str(sex: Sex) -> String {
    sex.to_string()
}

/// Writes a cohort's artifacts into `dir`; returns their file names.
pub fn write_cohort_artifacts(dir: &Path, cohort: &Cohort, a: &CohortAnalysis) -> Result<Vec<String>, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::new();
    let mut emit = |name: &str| -> PathBuf {
        files.push(name.to_string());
        dir.join(name)
    };

    write_json(&emit("auc.json"), &AucSummary::of(&a.cv))?;
    write_rows(
        &emit("folds.csv"),
        &["id", "fold", "label", "predicted_probability"],
        cohort.records.iter().enumerate().map(|(i, r)| {
            vec![
                r.id.clone(),
                a.cv.folds.folds[i].to_string(),
                u8::from(r.label).to_string(),
                a.cv.oof[i].to_string(),
            ]
        }),
    )?;

    let shap_path = emit("shap.csv");
    let file = create(&shap_path)?;
    a.shap.write_csv(file).map_err(|e| artifact_err(&shap_path, e))?;

    write_json(&emit("ranking.json"), &a.ranking)?;

    let top: Vec<usize> = a
        .ranking
        .names()
        .iter()
        .map(|n| a.shap.input_index(n).expect("ranked input"))
        .collect();
    write_rows(
        &emit("shap_top.csv"),
        &["rank", "feature", "id", "shap", "value"],
        top.iter().enumerate().flat_map(|(rank, &j)| {
            let name = a.shap.input_names[j].clone();
            (0..a.shap.n_rows()).map(move |i| {
                vec![
                    (rank + 1).to_string(),
                    name.clone(),
                    a.shap.ids[i].clone(),
                    a.shap.values[i][j].to_string(),
                    a.shap.data[i][j].to_string(),
                ]
            })
        }),
    )?;

    let logit_path = emit("logit_table.csv");
    let file = create(&logit_path)?;
    write_logit_table(&a.screen.results, file).map_err(|e| artifact_err(&logit_path, e))?;
    write_json(&emit("screen.json"), &a.screen)?;
    write_json(&emit("concordance.json"), &a.concordance)?;

    write_rows(
        &emit("embedding.csv"),
        &["id", "x", "y", "cluster", "label", "predicted_probability", "age", "sex"],
        cohort.records.iter().enumerate().map(|(i, r)| {
            let c = &a.embedding.coords[i];
            vec![
                r.id.clone(),
                c[0].to_string(),
                c.get(1).copied().unwrap_or(0.0).to_string(),
                a.clustering.model.labels[i].to_string(),
                u8::from(r.label).to_string(),
                a.cv.oof[i].to_string(),
                r.confounders.age.to_string(),
                sex_str(r.confounders.sex),
            ]
        }),
    )?;

    let representatives: Vec<_> = a
        .signatures
        .iter()
        .map(|s| {
            let rec = cohort
                .records
                .iter()
                .find(|r| r.id == s.representative)
                .expect("representative is a member");
            let mut fields = serde_json::Map::new();
            fields.insert("id".into(), rec.id.clone().into());
            for (name, v) in cohort.input_names().iter().zip(rec.input_vector()) {
                fields.insert(name.clone(), serde_json::json!(v));
            }
            fields
        })
        .collect();
    write_json(
        &emit("clusters.json"),
        &serde_json::json!({
            "k": a.clustering.model.k,
            "silhouette": a.clustering.model.silhouette,
            "silhouette_by_k": a.clustering.scores,
            "warning": a.clustering.warning,
            "initialization": a.embedding.initialization,
            "signature_fit": "resubstitution on the full cohort",
            "clusters": a.signatures,
            "representatives": representatives,
        }),
    )?;
    Ok(files)
}

fn cohort_report(cohort: &Cohort, status: CohortStatus) -> CohortReport {
    CohortReport {
        cohort: cohort.name,
        status,
        reason: None,
        failed_stage: None,
        n_records: cohort.len(),
        n_cases: cohort.n_cases(),
        auc: None,
        ranking: None,
        concordance: None,
        clustering: None,
        files: Vec::new(),
    }
}

/// Parses the input, runs every requested cohort and writes all artifacts
/// plus `report.json` and `provenance.txt` under `out`.
pub fn run_pipeline(config: &PipelineConfig, input: &Path, out: &Path) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let started = chrono::Utc::now();
    let schema = FeatureSchema::default();
    let file = File::open(input).map_err(io_err(input))?;
    let data = parse_cohort(std::io::BufReader::new(file), &schema).map_err(|source| PipelineError::Dataset {
        path: input.to_path_buf(),
        source,
    })?;
    if data.is_empty() {
        return Err(PipelineError::Dataset {
            path: input.to_path_buf(),
            source: DatasetError::TooFewRecords { needed: 1, found: 0 },
        });
    }
    let strata = stratify_by_bmi(&data).map_err(|source| PipelineError::Dataset {
        path: input.to_path_buf(),
        source,
    })?;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let mut reports = Vec::new();
    for &name in &config.cohorts {
        let cohort = strata.get(name);
        let dir = out.join(name.as_str());
        let outcome = match skip_reason(cohort, config.min_records) {
            Some(reason) => CohortOutcome::Skipped(reason),
            None => match analyze_cohort(cohort, config) {
                Ok(a) => CohortOutcome::Done(Box::new(a)),
                Err(f) => CohortOutcome::Failed(f),
            },
        };
        let report = match outcome {
            CohortOutcome::Done(a) => {
                let files = write_cohort_artifacts(&dir, cohort, &a)?;
                CohortReport {
                    auc: Some(AucSummary::of(&a.cv)),
                    ranking: Some(a.ranking.clone()),
                    concordance: Some(a.concordance.summary.clone()),
                    clustering: Some(ClusteringSummary {
                        k: a.clustering.model.k,
                        silhouette: a.clustering.model.silhouette,
                        scores: a.clustering.scores.clone(),
                        warning: a.clustering.warning.clone(),
                        degenerate_embedding: a.embedding.degenerate,
                    }),
                    files: files.iter().map(|f| format!("{name}/{f}")).collect(),
                    ..cohort_report(cohort, CohortStatus::Ok)
                }
            }
            CohortOutcome::Skipped(reason) => CohortReport {
                reason: Some(reason),
                ..cohort_report(cohort, CohortStatus::Skipped)
            },
            CohortOutcome::Failed(f) => CohortReport {
                reason: Some(f.message),
                failed_stage: Some(f.stage),
                ..cohort_report(cohort, CohortStatus::Failed)
            },
        };
        reports.push(report);
    }

    let mut echoed = config.clone();
    echoed.input = Some(input.to_path_buf());
    echoed.output = Some(out.to_path_buf());
    let report = RunReport {
        software: "phenoscope".into(),
        version: VERSION.into(),
        seed: config.seed,
        config: echoed,
        cohorts: reports,
    };
    write_json(&out.join("report.json"), &report)?;

    let finished = chrono::Utc::now();
    let prov = out.join("provenance.txt");
    let mut w = create(&prov)?;
    writeln!(
        w,
        "software: phenoscope {VERSION}\nseed: {}\nstarted: {}\nfinished: {}",
        config.seed,
        started.to_rfc3339(),
        finished.to_rfc3339()
    )
    .and_then(|_| w.flush())
    .map_err(io_err(&prov))?;
    Ok(report)
}

/// Generates a synthetic cohort from a manifest file into `out/cohort.csv`
/// and `out/truth.json`.
pub fn simulate(manifest: &Path, out: &Path) -> Result<(Cohort, crate::synth::Truth), PipelineError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let manifest = SynthManifest::from_json(&text)?;
    let (cohort, truth) = generate_cohort(&manifest)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let csv_path = out.join("cohort.csv");
    write_cohort(&cohort, create(&csv_path)?).map_err(|e| artifact_err(&csv_path, e))?;
    write_json(&out.join("truth.json"), &truth)?;
    Ok((cohort, truth))
}
