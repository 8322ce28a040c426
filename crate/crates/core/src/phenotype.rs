//! Cluster descriptions: composition, one-vs-rest signature forests and
//! representative records.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Cohort, Sex};
use crate::embed::Embedding;
use crate::forest::{balanced_weights, fit_forest_weighted, roc_auc, ForestConfig, ForestError};
use crate::shap::{explain_cohort, rank_features, FeatureRanking, ShapError};

/// Side size below which a signature is flagged low-confidence.
pub const MIN_SIGNATURE_SIDE: usize = 20;
pub const SIGNATURE_LENGTH: usize = 20;

#[derive(Debug, Error)]
pub enum PhenotypeError {
    #[error("{labels} cluster labels for {records} records")]
    LengthMismatch { labels: usize, records: usize },
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("one-vs-rest signatures need at least two clusters")]
    SingleCluster,
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Shap(#[from] ShapError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub cluster: usize,
    pub size: usize,
    pub t2d_fraction: f64,
    pub female_fraction: f64,
    pub median_age: f64,
    /// Cluster T2D fraction over cohort T2D fraction; `None` for a cohort without cases.
    pub enrichment: Option<f64>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn n_clusters(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Per-cluster size, case and female fractions, median age and enrichment.
pub fn cluster_composition(cohort: &Cohort, labels: &[usize]) -> Result<Vec<Composition>, PhenotypeError> {
    if labels.len() != cohort.len() {
        return Err(PhenotypeError::LengthMismatch {
            labels: labels.len(),
            records: cohort.len(),
        });
    }
    let cohort_fraction = cohort.n_cases() as f64 / cohort.len() as f64;
    (0..n_clusters(labels))
        .map(|c| {
            let members: Vec<_> = cohort
                .records
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r)
                .collect();
            if members.is_empty() {
                return Err(PhenotypeError::EmptyCluster(c));
            }
            let size = members.len();
            let cases = members.iter().filter(|r| r.label).count();
            let female = members.iter().filter(|r| r.confounders.sex == Sex::F).count();
            let mut ages: Vec<f64> = members.iter().map(|r| r.confounders.age).collect();
            let t2d_fraction = cases as f64 / size as f64;
            Ok(Composition {
                cluster: c,
                size,
                t2d_fraction,
                female_fraction: female as f64 / size as f64,
                median_age: median(&mut ages),
                enrichment: (cohort_fraction > 0.0).then(|| t2d_fraction / cohort_fraction),
            })
        })
        .collect()
}

/// Member nearest the cluster's mean embedding coordinate, ties to the
/// lexicographically smallest id.
pub fn cluster_representative(embedding: &Embedding, labels: &[usize], cluster: usize) -> Result<String, PhenotypeError> {
    if labels.len() != embedding.len() {
        return Err(PhenotypeError::LengthMismatch {
            labels: labels.len(),
            records: embedding.len(),
        });
    }
    let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == cluster).collect();
    if members.is_empty() {
        return Err(PhenotypeError::EmptyCluster(cluster));
    }
    let dim = embedding.coords[0].len();
    let mut centroid = vec![0.0; dim];
    for &i in &members {
        centroid.iter_mut().zip(&embedding.coords[i]).for_each(|(c, v)| *c += v);
    }
    centroid.iter_mut().for_each(|c| *c /= members.len() as f64);
    let d = |i: usize| -> f64 {
        embedding.coords[i]
            .iter()
            .zip(&centroid)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let best = members
        .iter()
        .copied()
        .min_by(|&a, &b| d(a).total_cmp(&d(b)).then_with(|| embedding.ids[a].cmp(&embedding.ids[b])))
        .expect("non-empty");
    Ok(embedding.ids[best].clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSignature {
    pub cluster: usize,
    /// Resubstitution AUC of the cluster-vs-rest forest.
    pub ovr_auc: f64,
    pub signature: FeatureRanking,
    pub composition: Composition,
    pub representative: String,
    pub low_confidence: bool,
    /// Always true: the signature model is fit and scored on the full cohort.
    pub resubstitution: bool,
}

/// Cluster-vs-rest forest on every input of the full cohort, explained with
/// TreeSHAP; a risk direction pushes toward cluster membership.
pub fn ovr_signature(
    cohort: &Cohort,
    labels: &[usize],
    cluster: usize,
    embedding: &Embedding,
    config: &ForestConfig,
) -> Result<ClusterSignature, PhenotypeError> {
    if labels.len() != cohort.len() {
        return Err(PhenotypeError::LengthMismatch {
            labels: labels.len(),
            records: cohort.len(),
        });
    }
    let k = n_clusters(labels);
    if k < 2 {
        return Err(PhenotypeError::SingleCluster);
    }
    let target: Vec<bool> = labels.iter().map(|&l| l == cluster).collect();
    let inside = target.iter().filter(|&&t| t).count();
    if inside == 0 {
        return Err(PhenotypeError::EmptyCluster(cluster));
    }
    let outside = target.len() - inside;
    if outside == 0 {
        return Err(PhenotypeError::SingleCluster);
    }
    let x = cohort.input_matrix();
    let weights = balanced_weights(&target)?;
    let model = fit_forest_weighted(&x, &target, weights, config)?;
    let scores = model.predict_many(&x)?;
    let ovr_auc = roc_auc(&scores, &target)?;
    let shap = explain_cohort(&model, cohort)?;
    let top = SIGNATURE_LENGTH.min(shap.input_names.len());
    let signature = rank_features(&shap, top)?;
    let composition = cluster_composition(cohort, labels)?
        .into_iter()
        .nth(cluster)
        .ok_or(PhenotypeError::EmptyCluster(cluster))?;
    Ok(ClusterSignature {
        cluster,
        ovr_auc,
        signature,
        composition,
        representative: cluster_representative(embedding, labels, cluster)?,
        low_confidence: inside < MIN_SIGNATURE_SIDE || outside < MIN_SIGNATURE_SIDE,
        resubstitution: true,
    })
}
