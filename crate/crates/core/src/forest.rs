//! Random-forest classifier with balanced class weights, fold-wise
//! cross-validation and ROC AUC.
//!
//! Trees store a cover (weighted training mass) on every node; TreeSHAP needs
//! them to evaluate conditional expectations.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cohort, FoldAssignment};
use crate::seed;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("both label classes must be present")]
    SingleClass,
    #[error("no training records")]
    Empty,
    #[error("row {row}, column {column} is not finite")]
    NonFinite { row: usize, column: usize },
    #[error("expected {expected} inputs, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("{rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("invalid forest config: {0}")]
    InvalidConfig(String),
    #[error("training split of fold {fold} has a single class")]
    SingleClassTraining { fold: usize },
    #[error("fold assignment does not match cohort ({0})")]
    FoldMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    Balanced,
    None,
}

fn default_trees() -> usize {
    300
}
fn default_depth() -> usize {
    10
}
fn default_leaf() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_weighting() -> ClassWeighting {
    ClassWeighting::Balanced
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    #[serde(default = "default_trees")]
    pub n_trees: usize,
    #[serde(default = "default_depth")]
    pub max_depth: usize,
    #[serde(default = "default_leaf")]
    pub min_samples_leaf: usize,
    /// Candidate features per split; `None` means floor(sqrt(p)).
    #[serde(default)]
    pub features_per_split: Option<usize>,
    #[serde(default = "default_true")]
    pub bootstrap: bool,
    #[serde(default = "default_weighting")]
    pub class_weighting: ClassWeighting,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: default_trees(),
            max_depth: default_depth(),
            min_samples_leaf: default_leaf(),
            features_per_split: None,
            bootstrap: true,
            class_weighting: ClassWeighting::Balanced,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidConfig("n_trees must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(ForestError::InvalidConfig("max_depth must be >= 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(ForestError::InvalidConfig("min_samples_leaf must be >= 1".into()));
        }
        if self.features_per_split == Some(0) {
            return Err(ForestError::InvalidConfig("features_per_split must be >= 1".into()));
        }
        Ok(())
    }

    pub fn mtry(&self, n_inputs: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_inputs as f64).sqrt().floor() as usize)
            .clamp(1, n_inputs.max(1))
    }

    pub fn with_seed(&self, seed: u64) -> ForestConfig {
        ForestConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            negative: 1.0,
            positive: 1.0,
        }
    }

    pub fn of(&self, label: bool) -> f64 {
        if label {
            self.positive
        } else {
            self.negative
        }
    }
}

/// `w_c = n / (2 n_c)`, giving both classes equal total mass.
pub fn balanced_weights(labels: &[bool]) -> Result<ClassWeights, ForestError> {
    let n = labels.len();
    let n1 = labels.iter().filter(|&&y| y).count();
    let n0 = n - n1;
    if n0 == 0 || n1 == 0 {
        return Err(ForestError::SingleClass);
    }
    Ok(ClassWeights {
        negative: n as f64 / (2.0 * n0 as f64),
        positive: n as f64 / (2.0 * n1 as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        /// Weighted fraction of class 1.
        value: f64,
        cover: f64,
        /// Raw (bootstrap multiplicity) training count.
        count: usize,
    },
}

impl Node {
    pub fn cover(&self) -> f64 {
        match *self {
            Node::Split { cover, .. } | Node::Leaf { cover, .. } => cover,
        }
    }
}

/// Arena-allocated binary tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Tree {
        Tree {
            nodes: vec![Node::Leaf {
                value,
                cover,
                count: 0,
            }],
        }
    }

    /// Leaf reached by routing `x` (left iff value <= threshold).
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[feature] <= threshold { left } else { right },
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    /// Longest root-to-leaf path, in edges.
    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub config: ForestConfig,
    pub n_inputs: usize,
}

impl ForestModel {
    /// Mean of per-tree leaf values.
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, ForestError> {
        if x.len() != self.n_inputs {
            return Err(ForestError::Arity {
                expected: self.n_inputs,
                found: x.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>, ForestError> {
        rows.par_iter().map(|r| self.predict_proba(r)).collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }
}

/// Free-function form of [`ForestModel::predict_proba`].
pub fn predict_proba(model: &ForestModel, x: &[f64]) -> Result<f64, ForestError> {
    model.predict_proba(x)
}

fn check_inputs(x: &[Vec<f64>], y: &[bool]) -> Result<usize, ForestError> {
    if x.is_empty() {
        return Err(ForestError::Empty);
    }
    if x.len() != y.len() {
        return Err(ForestError::LengthMismatch {
            rows: x.len(),
            labels: y.len(),
        });
    }
    let p = x[0].len();
    for (r, row) in x.iter().enumerate() {
        if row.len() != p {
            return Err(ForestError::Arity {
                expected: p,
                found: row.len(),
            });
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite { row: r, column: c });
        }
    }
    Ok(p)
}

/// Fits a forest with the class weighting named in `config`.
pub fn fit_forest(x: &[Vec<f64>], y: &[bool], config: &ForestConfig) -> Result<ForestModel, ForestError> {
    check_inputs(x, y)?;
    let weights = match config.class_weighting {
        ClassWeighting::Balanced => balanced_weights(y)?,
        ClassWeighting::None => {
            balanced_weights(y)?;
            ClassWeights::uniform()
        }
    };
    fit_forest_weighted(x, y, weights, config)
}

/// Fits a forest with explicit class weights. Unlike [`fit_forest`] a single
/// class is accepted, which yields constant trees.
pub fn fit_forest_weighted(
    x: &[Vec<f64>],
    y: &[bool],
    weights: ClassWeights,
    config: &ForestConfig,
) -> Result<ForestModel, ForestError> {
    config.validate()?;
    let p = check_inputs(x, y)?;
    let columns: Vec<Vec<f64>> = (0..p).map(|j| x.iter().map(|r| r[j]).collect()).collect();
    let data = TrainingData {
        columns: &columns,
        labels: y,
        weights,
    };
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng_from(seed::derive_indexed(config.seed, "tree", t as u64));
            fit_tree(&data, config, p, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        trees,
        config: config.clone(),
        n_inputs: p,
    })
}

struct TrainingData<'a> {
    columns: &'a [Vec<f64>],
    labels: &'a [bool],
    weights: ClassWeights,
}

struct Builder<'a, R: Rng> {
    data: &'a TrainingData<'a>,
    config: &'a ForestConfig,
    n_inputs: usize,
    mtry: usize,
    counts: Vec<u32>,
    nodes: Vec<Node>,
    rng: &'a mut R,
    sort_buf: Vec<(f64, u32)>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

const GAIN_EPS: f64 = 1e-12;

fn fit_tree<R: Rng>(data: &TrainingData<'_>, config: &ForestConfig, p: usize, rng: &mut R) -> Tree {
    let n = data.labels.len();
    let mut counts = vec![0u32; n];
    if config.bootstrap {
        for _ in 0..n {
            counts[rng.gen_range(0..n)] += 1;
        }
    } else {
        counts.iter_mut().for_each(|c| *c = 1);
    }
    let mut samples: Vec<u32> = (0..n as u32).filter(|&i| counts[i as usize] > 0).collect();
    let mut builder = Builder {
        data,
        config,
        n_inputs: p,
        mtry: config.mtry(p),
        counts,
        nodes: Vec::new(),
        rng,
        sort_buf: Vec::with_capacity(samples.len()),
    };
    builder.build(&mut samples, 0);
    Tree {
        nodes: builder.nodes,
    }
}

impl<R: Rng> Builder<'_, R> {
    fn masses(&self, samples: &[u32]) -> (f64, f64, usize) {
        let mut w0 = 0.0;
        let mut w1 = 0.0;
        let mut raw = 0usize;
        for &i in samples {
            let i = i as usize;
            let c = self.counts[i] as f64;
            if self.data.labels[i] {
                w1 += c * self.data.weights.positive;
            } else {
                w0 += c * self.data.weights.negative;
            }
            raw += self.counts[i] as usize;
        }
        (w0, w1, raw)
    }

    /// Builds the subtree over `samples` and returns its node index.
    fn build(&mut self, samples: &mut [u32], depth: usize) -> usize {
        let (w0, w1, raw) = self.masses(samples);
        let cover = w0 + w1;
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: if cover > 0.0 { w1 / cover } else { 0.0 },
            cover,
            count: raw,
        });
        let min_leaf = self.config.min_samples_leaf;
        if depth >= self.config.max_depth || w0 == 0.0 || w1 == 0.0 || raw < 2 * min_leaf {
            return slot;
        }
        let Some(choice) = self.best_split(samples, w0, w1, raw) else {
            return slot;
        };
        let column = &self.data.columns[choice.feature];
        let mut boundary = 0;
        for i in 0..samples.len() {
            if column[samples[i] as usize] <= choice.threshold {
                samples.swap(i, boundary);
                boundary += 1;
            }
        }
        let (lo, hi) = samples.split_at_mut(boundary);
        let left = self.build(lo, depth + 1);
        let right = self.build(hi, depth + 1);
        let cover = self.nodes[left].cover() + self.nodes[right].cover();
        debug_assert!(choice.gain > 0.0);
        self.nodes[slot] = Node::Split {
            feature: choice.feature,
            threshold: choice.threshold,
            left,
            right,
            cover,
        };
        slot
    }

    fn best_split(&mut self, samples: &[u32], w0: f64, w1: f64, raw: usize) -> Option<SplitChoice> {
        let min_leaf = self.config.min_samples_leaf;
        let total = w0 + w1;
        let parent_term = (w0 * w0 + w1 * w1) / total;
        let mut features = index::sample(self.rng, self.n_inputs, self.mtry).into_vec();
        features.sort_unstable();

        let mut best: Option<SplitChoice> = None;
        let pos_w = self.data.weights.positive;
        let neg_w = self.data.weights.negative;
        for &f in &features {
            let column = &self.data.columns[f];
            self.sort_buf.clear();
            self.sort_buf
                .extend(samples.iter().map(|&i| (column[i as usize], i)));
            self.sort_buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

            let mut l0 = 0.0;
            let mut l1 = 0.0;
            let mut l_raw = 0usize;
            let m = self.sort_buf.len();
            for t in 0..m - 1 {
                let (value, i) = self.sort_buf[t];
                let i = i as usize;
                let c = self.counts[i];
                if self.data.labels[i] {
                    l1 += c as f64 * pos_w;
                } else {
                    l0 += c as f64 * neg_w;
                }
                l_raw += c as usize;
                let next = self.sort_buf[t + 1].0;
                if next == value || l_raw < min_leaf {
                    continue;
                }
                if raw - l_raw < min_leaf {
                    break;
                }
                let r0 = w0 - l0;
                let r1 = w1 - l1;
                let lw = l0 + l1;
                let rw = r0 + r1;
                if lw <= 0.0 || rw <= 0.0 {
                    continue;
                }
                let gain = ((l0 * l0 + l1 * l1) / lw + (r0 * r0 + r1 * r1) / rw - parent_term) / total;
                if gain > GAIN_EPS && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = 0.5 * (value + next);
                    if threshold >= next {
                        threshold = value;
                    }
                    best = Some(SplitChoice {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }
}

/// Area under the ROC curve:
/// (concordant + 0.5 * tied positive/negative pairs) / (n_pos * n_neg).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, ForestError> {
    if scores.len() != labels.len() {
        return Err(ForestError::LengthMismatch {
            rows: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ForestError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled numerator keeps the count integral
    let mut twice_concordant: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        let (mut pos, mut neg) = (0u64, 0u64);
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            if labels[order[end]] {
                pos += 1;
            } else {
                neg += 1;
            }
            end += 1;
        }
        twice_concordant += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        start = end;
    }
    Ok(twice_concordant as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    /// `None` where the validation fold held a single class.
    pub fold_auc: Vec<Option<f64>>,
    pub mean_auc: f64,
    pub sd_auc: f64,
    pub undefined_folds: usize,
    #[serde(skip)]
    pub models: Vec<ForestModel>,
    /// Out-of-fold probability per record, cohort order.
    pub oof: Vec<f64>,
    pub folds: FoldAssignment,
}

impl CvResult {
    /// `mean ± sd` to two decimals, e.g. `0.74 ± 0.02`.
    pub fn summary(&self) -> String {
        format_auc(self.mean_auc, self.sd_auc)
    }
}

pub fn format_auc(mean: f64, sd: f64) -> String {
    format!("{mean:.2} ± {sd:.2}")
}

/// Mean and population SD.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fits one forest per fold on the other folds, with balanced weights
/// computed on that training split, and scores the held-out fold.
pub fn cross_validate(cohort: &Cohort, config: &ForestConfig, folds: &FoldAssignment) -> Result<CvResult, ForestError> {
    if folds.ids.len() != cohort.len() {
        return Err(ForestError::FoldMismatch(format!(
            "{} assignments for {} records",
            folds.ids.len(),
            cohort.len()
        )));
    }
    if folds.ids.iter().zip(&cohort.records).any(|(a, r)| *a != r.id) {
        return Err(ForestError::FoldMismatch("record ids differ".into()));
    }
    let x = cohort.input_matrix();
    let y = cohort.labels();
    let mut oof = vec![f64::NAN; cohort.len()];
    let mut fold_auc = Vec::with_capacity(folds.k);
    let mut models = Vec::with_capacity(folds.k);
    for fold in 0..folds.k {
        let train = folds.training_indices(fold);
        let valid = folds.validation_indices(fold);
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<bool> = train.iter().map(|&i| y[i]).collect();
        if ty.iter().all(|&v| v) || ty.iter().all(|&v| !v) {
            return Err(ForestError::SingleClassTraining { fold });
        }
        let fold_config = config.with_seed(seed::derive_indexed(config.seed, "fold", fold as u64));
        let model = fit_forest(&tx, &ty, &fold_config)?;
        let vx: Vec<Vec<f64>> = valid.iter().map(|&i| x[i].clone()).collect();
        let preds = model.predict_many(&vx)?;
        for (&i, &p) in valid.iter().zip(&preds) {
            oof[i] = p;
        }
        let vy: Vec<bool> = valid.iter().map(|&i| y[i]).collect();
        fold_auc.push(roc_auc(&preds, &vy).ok());
        models.push(model);
    }
    let defined: Vec<f64> = fold_auc.iter().flatten().copied().collect();
    let (mean_auc, sd_auc) = mean_sd(&defined);
    Ok(CvResult {
        undefined_folds: fold_auc.len() - defined.len(),
        fold_auc,
        mean_auc,
        sd_auc,
        models,
        oof,
        folds: folds.clone(),
    })
}
