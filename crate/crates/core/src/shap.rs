//! Exact path-dependent TreeSHAP for the forest, out-of-fold attribution
//! matrices, importance ranking and risk/protective directionality.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Cohort;
use crate::forest::{CvResult, ForestModel, Node, Tree};

#[derive(Debug, Error)]
pub enum ShapError {
    #[error("malformed tree: {0}")]
    MalformedTree(String),
    #[error("expected {expected} inputs, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("no model for fold {0}")]
    MissingFoldModel(usize),
    #[error("requested top {k} of only {available} inputs")]
    TooManyRequested { k: usize, available: usize },
    #[error("attribution matrix has no rows")]
    EmptyMatrix,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Attributions for one record under one tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub values: Vec<f64>,
    pub base: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct PathElement {
    feature: Option<usize>,
    zero_fraction: f64,
    one_fraction: f64,
    weight: f64,
}

fn validate_tree(tree: &Tree) -> Result<(), ShapError> {
    if tree.nodes.is_empty() {
        return Err(ShapError::MalformedTree("no nodes".into()));
    }
    for (i, node) in tree.nodes.iter().enumerate() {
        if !(node.cover() > 0.0) {
            return Err(ShapError::MalformedTree(format!("node {i} has non-positive cover")));
        }
        if let Node::Split { left, right, .. } = *node {
            if left >= tree.nodes.len() || right >= tree.nodes.len() || left <= i || right <= i {
                return Err(ShapError::MalformedTree(format!("node {i} has invalid children")));
            }
        }
    }
    Ok(())
}

/// Cover-weighted mean leaf value of the subtree at `node`.
pub fn expected_value(tree: &Tree, node: usize) -> f64 {
    match tree.nodes[node] {
        Node::Leaf { value, .. } => value,
        Node::Split {
            left, right, cover, ..
        } => {
            (tree.nodes[left].cover() * expected_value(tree, left)
                + tree.nodes[right].cover() * expected_value(tree, right))
                / cover
        }
    }
}

/// Exact Shapley values of `tree` at `x` with cover-weighted conditioning.
pub fn tree_shap(tree: &Tree, x: &[f64]) -> Result<Attribution, ShapError> {
    validate_tree(tree)?;
    let mut values = vec![0.0; x.len()];
    let base = expected_value(tree, 0);
    accumulate_tree_shap(tree, x, &mut values);
    Ok(Attribution { values, base })
}

fn accumulate_tree_shap(tree: &Tree, x: &[f64], phi: &mut [f64]) {
    let depth = tree.depth() + 2;
    let mut path = vec![PathElement::default(); depth * (depth + 1) / 2];
    let mut walker = Walker { tree, x, phi };
    walker.recurse(0, &mut path, 0, 1.0, 1.0, None);
}

struct Walker<'a> {
    tree: &'a Tree,
    x: &'a [f64],
    phi: &'a mut [f64],
}

impl Walker<'_> {
    fn recurse(
        &mut self,
        node: usize,
        path: &mut [PathElement],
        depth: usize,
        zero_fraction: f64,
        one_fraction: f64,
        feature: Option<usize>,
    ) {
        extend_path(path, depth, zero_fraction, one_fraction, feature);
        let mut depth = depth;
        match self.tree.nodes[node] {
            Node::Leaf { value, .. } => {
                for i in 1..=depth {
                    let w = unwound_path_sum(path, depth, i);
                    let el = path[i];
                    if let Some(f) = el.feature {
                        self.phi[f] += w * (el.one_fraction - el.zero_fraction) * value;
                    }
                }
            }
            Node::Split {
                feature: split,
                threshold,
                left,
                right,
                cover,
            } => {
                let (hot, cold) = if self.x[split] <= threshold {
                    (left, right)
                } else {
                    (right, left)
                };
                let hot_zero = self.tree.nodes[hot].cover() / cover;
                let cold_zero = self.tree.nodes[cold].cover() / cover;
                let mut incoming_zero = 1.0;
                let mut incoming_one = 1.0;
                // a feature seen earlier on the path is merged, not repeated
                if let Some(k) = (1..=depth).find(|&k| path[k].feature == Some(split)) {
                    incoming_zero = path[k].zero_fraction;
                    incoming_one = path[k].one_fraction;
                    unwind_path(path, depth, k);
                    depth -= 1;
                }
                let (parent, child) = path.split_at_mut(depth + 1);
                child[..depth + 1].copy_from_slice(parent);
                self.recurse(hot, child, depth + 1, hot_zero * incoming_zero, incoming_one, Some(split));
                child[..depth + 1].copy_from_slice(parent);
                self.recurse(cold, child, depth + 1, cold_zero * incoming_zero, 0.0, Some(split));
            }
        }
    }
}

fn extend_path(path: &mut [PathElement], depth: usize, zero_fraction: f64, one_fraction: f64, feature: Option<usize>) {
    path[depth] = PathElement {
        feature,
        zero_fraction,
        one_fraction,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    };
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one_fraction * path[i].weight * (i + 1) as f64 / d1;
        path[i].weight = zero_fraction * path[i].weight * (depth - i) as f64 / d1;
    }
}

fn unwind_path(path: &mut [PathElement], depth: usize, index: usize) {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one_portion = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next_one_portion * d1 / ((i + 1) as f64 * one);
            next_one_portion = tmp - path[i].weight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

fn unwound_path_sum(path: &[PathElement], depth: usize, index: usize) -> f64 {
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let d1 = (depth + 1) as f64;
    let mut next_one_portion = path[depth].weight;
    let mut total = 0.0;
    if one != 0.0 {
        for i in (0..depth).rev() {
            let tmp = next_one_portion / ((i + 1) as f64 * one);
            total += tmp;
            next_one_portion = path[i].weight - tmp * zero * (depth - i) as f64;
        }
    } else {
        for i in (0..depth).rev() {
            total += path[i].weight / (zero * (depth - i) as f64);
        }
    }
    total * d1
}

/// Per-record attributions over a set of model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapMatrix {
    pub ids: Vec<String>,
    pub input_names: Vec<String>,
    /// Expected model output per row (the explaining model's base value).
    pub base: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// The explained input rows, kept for directionality and plotting.
    pub data: Vec<Vec<f64>>,
}

impl ShapMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    pub fn data_column(&self, j: usize) -> Vec<f64> {
        self.data.iter().map(|r| r[j]).collect()
    }

    pub fn input_index(&self, name: &str) -> Option<usize> {
        self.input_names.iter().position(|n| n == name)
    }

    /// Attribution columns for the named inputs, one row per record.
    pub fn select(&self, names: &[String]) -> Result<Vec<Vec<f64>>, ShapError> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.input_index(n).ok_or_else(|| ShapError::UnknownInput(n.clone())))
            .collect::<Result<_, _>>()?;
        Ok(self
            .values
            .iter()
            .map(|row| idx.iter().map(|&j| row[j]).collect())
            .collect())
    }

    /// CSV with `id,base,<inputs...>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ShapError> {
        let mut csv = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "base".to_string()];
        header.extend(self.input_names.iter().cloned());
        csv.write_record(&header)?;
        for ((id, base), row) in self.ids.iter().zip(&self.base).zip(&self.values) {
            let mut rec = vec![id.clone(), base.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            csv.write_record(&rec)?;
        }
        csv.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Forest attributions for each row: the mean of per-tree attribution vectors.
pub fn forest_shap(model: &ForestModel, rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>), ShapError> {
    for tree in &model.trees {
        validate_tree(tree)?;
    }
    if let Some(r) = rows.iter().find(|r| r.len() != model.n_inputs) {
        return Err(ShapError::Arity {
            expected: model.n_inputs,
            found: r.len(),
        });
    }
    let n_trees = model.trees.len() as f64;
    let base = model.trees.iter().map(|t| expected_value(t, 0)).sum::<f64>() / n_trees;
    let values = rows
        .par_iter()
        .map(|x| {
            let mut sum = vec![0.0; x.len()];
            let mut per_tree = vec![0.0; x.len()];
            for tree in &model.trees {
                per_tree.iter_mut().for_each(|v| *v = 0.0);
                accumulate_tree_shap(tree, x, &mut per_tree);
                sum.iter_mut().zip(&per_tree).for_each(|(s, v)| *s += v);
            }
            sum.iter_mut().for_each(|v| *v /= n_trees);
            sum
        })
        .collect();
    Ok((vec![base; rows.len()], values))
}

/// Explains every record of `cohort` with a given model.
pub fn explain_cohort(model: &ForestModel, cohort: &Cohort) -> Result<ShapMatrix, ShapError> {
    let data = cohort.input_matrix();
    let (base, values) = forest_shap(model, &data)?;
    Ok(ShapMatrix {
        ids: cohort.ids(),
        input_names: cohort.input_names(),
        base,
        values,
        data,
    })
}

/// Out-of-fold attributions: each record is explained by the model of the
/// fold that held it out. Rows follow cohort order.
pub fn concat_fold_shap(cv: &CvResult, cohort: &Cohort) -> Result<ShapMatrix, ShapError> {
    if cv.folds.ids.len() != cohort.len() {
        return Err(ShapError::LengthMismatch(cv.folds.ids.len(), cohort.len()));
    }
    let data = cohort.input_matrix();
    let p = cohort.input_names().len();
    let mut base = vec![0.0; cohort.len()];
    let mut values = vec![vec![0.0; p]; cohort.len()];
    for fold in 0..cv.folds.k {
        let model = cv.models.get(fold).ok_or(ShapError::MissingFoldModel(fold))?;
        let idx = cv.folds.validation_indices(fold);
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data[i].clone()).collect();
        let (b, v) = forest_shap(model, &rows)?;
        for ((&i, bi), vi) in idx.iter().zip(b).zip(v) {
            base[i] = bi;
            values[i] = vi;
        }
    }
    Ok(ShapMatrix {
        ids: cohort.ids(),
        input_names: cohort.input_names(),
        base,
        values,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Risk,
    Protective,
    Indeterminate,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Risk => "risk",
            Direction::Protective => "protective",
            Direction::Indeterminate => "indeterminate",
        }
    }
}

/// Correlations with magnitude below this read as indeterminate.
pub const DIRECTION_DEAD_ZONE: f64 = 0.05;

/// Sign of the Pearson correlation between an input's values and its
/// attributions. Positive means higher values push toward the positive class.
pub fn feature_direction(shap_values: &[f64], feature_values: &[f64]) -> Result<Direction, ShapError> {
    if shap_values.len() != feature_values.len() {
        return Err(ShapError::LengthMismatch(shap_values.len(), feature_values.len()));
    }
    if shap_values.is_empty() {
        return Err(ShapError::EmptyMatrix);
    }
    let n = shap_values.len() as f64;
    let ms = shap_values.iter().sum::<f64>() / n;
    let mf = feature_values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&s, &f) in shap_values.iter().zip(feature_values) {
        let (ds, df) = (s - ms, f - mf);
        sxy += ds * df;
        sxx += df * df;
        syy += ds * ds;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Ok(Direction::Indeterminate);
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(if r.abs() < DIRECTION_DEAD_ZONE {
        Direction::Indeterminate
    } else if r > 0.0 {
        Direction::Risk
    } else {
        Direction::Protective
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub name: String,
    pub importance: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub entries: Vec<RankedFeature>,
}

impl FeatureRanking {
    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&RankedFeature> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Top `k` inputs by mean |attribution|, ties broken by name.
pub fn rank_features(shap: &ShapMatrix, k: usize) -> Result<FeatureRanking, ShapError> {
    rank_features_among(shap, k, |_| true)
}

/// As [`rank_features`], restricted to inputs accepted by `eligible`.
pub fn rank_features_among(
    shap: &ShapMatrix,
    k: usize,
    eligible: impl Fn(&str) -> bool,
) -> Result<FeatureRanking, ShapError> {
    if shap.values.is_empty() {
        return Err(ShapError::EmptyMatrix);
    }
    let candidates: Vec<usize> = (0..shap.input_names.len())
        .filter(|&j| eligible(&shap.input_names[j]))
        .collect();
    if k > candidates.len() {
        return Err(ShapError::TooManyRequested {
            k,
            available: candidates.len(),
        });
    }
    let n = shap.n_rows() as f64;
    let mut scored: Vec<(usize, f64)> = candidates
        .into_iter()
        .map(|j| (j, shap.values.iter().map(|r| r[j].abs()).sum::<f64>() / n))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| shap.input_names[a.0].cmp(&shap.input_names[b.0]))
    });
    let entries = scored
        .into_iter()
        .take(k)
        .map(|(j, importance)| {
            Ok(RankedFeature {
                name: shap.input_names[j].clone(),
                importance,
                direction: feature_direction(&shap.column(j), &shap.data_column(j))?,
            })
        })
        .collect::<Result<_, ShapError>>()?;
    Ok(FeatureRanking { entries })
}
