//! Confounder-adjusted logistic screens with Wald inference,
//! Benjamini-Hochberg adjustment and SHAP sign concordance.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

use crate::dataset::StandardizedCohort;
use crate::shap::{Direction, FeatureRanking};

/// Two-sided 95% normal quantile used for Wald intervals.
pub const Z_95: f64 = 1.96;

pub const MAX_IRLS_ITERATIONS: usize = 100;
const SCORE_TOL: f64 = 1e-8;
const DEVIANCE_TOL: f64 = 1e-10;
const SEPARATION_BETA: f64 = 15.0;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("column `{column}` is collinear with {with:?}")]
    RankDeficient { column: String, with: Vec<String> },
    #[error("both outcome classes must be present")]
    SingleClass,
    #[error("design has {rows} rows but outcome has {outcome}")]
    LengthMismatch { rows: usize, outcome: usize },
    #[error("empty design")]
    EmptyDesign,
    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),
    #[error("fisher information is singular")]
    SingularInformation,
    #[error("feature `{0}` missing from the cohort")]
    UnknownFeature(String),
    #[error("feature `{0}` is not in the ranking")]
    FeatureMismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Column-major design matrix with named columns. The intercept, when wanted,
/// is an explicit column of ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Design {
    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    fn matrix(&self) -> DMatrix<f64> {
        let n = self.n_rows();
        DMatrix::from_fn(n, self.columns.len(), |i, j| self.columns[j][i])
    }

    /// Sequential Gram-Schmidt; the first column that is (numerically) a
    /// combination of earlier ones is reported with its partners.
    pub fn check_rank(&self) -> Result<(), StatsError> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut basis_owner: Vec<usize> = Vec::new();
        for (j, col) in self.columns.iter().enumerate() {
            let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut resid = col.clone();
            let mut partners = Vec::new();
            for (q, &owner) in basis.iter().zip(&basis_owner) {
                let c: f64 = q.iter().zip(&resid).map(|(a, b)| a * b).sum();
                if c.abs() > 1e-12 * norm0.max(1e-300) {
                    partners.push(self.names[owner].clone());
                }
                resid.iter_mut().zip(q).for_each(|(r, qv)| *r -= c * qv);
            }
            let norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm0 == 0.0 || norm <= 1e-10 * norm0 {
                return Err(StatsError::RankDeficient {
                    column: self.names[j].clone(),
                    with: partners,
                });
            }
            resid.iter_mut().for_each(|v| *v /= norm);
            basis.push(resid);
            basis_owner.push(j);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    /// Inverse Fisher information at the final estimate.
    pub covariance: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Coefficients diverged; standard errors are unreliable.
    pub separation: bool,
    pub deviance: f64,
    pub max_abs_score: f64,
}

impl LogisticFit {
    pub fn se(&self, j: usize) -> f64 {
        self.covariance[j][j].sqrt()
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn deviance(eta: &DVector<f64>, y: &[f64]) -> f64 {
    2.0 * eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| yi * softplus(-e) + (1.0 - yi) * softplus(e))
        .sum::<f64>()
}

struct Evaluation {
    deviance: f64,
    score: DVector<f64>,
    information: DMatrix<f64>,
}

fn evaluate(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> Evaluation {
    let eta = x * beta;
    let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
    let resid = DVector::from_iterator(y.len(), y.iter().zip(&p).map(|(yi, pi)| yi - pi));
    let score = x.transpose() * resid;
    let mut weighted = x.clone();
    for (i, pi) in p.iter().enumerate() {
        let w = pi * (1.0 - pi);
        weighted.row_mut(i).scale_mut(w);
    }
    let information = x.transpose() * weighted;
    Evaluation {
        deviance: deviance(&eta, y),
        score,
        information,
    }
}

fn invert_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.clone().try_inverse())
}

/// Maximum-likelihood logistic regression by IRLS (Newton) with step halving.
///
/// Stops when the largest score component is below 1e-8 or the deviance
/// changes by less than 1e-10, after at most 100 iterations.
pub fn fit_logistic(design: &Design, y: &[f64]) -> Result<LogisticFit, StatsError> {
    if design.columns.is_empty() || design.n_rows() == 0 {
        return Err(StatsError::EmptyDesign);
    }
    if design.n_rows() != y.len() {
        return Err(StatsError::LengthMismatch {
            rows: design.n_rows(),
            outcome: y.len(),
        });
    }
    let cases = y.iter().filter(|&&v| v > 0.5).count();
    if cases == 0 || cases == y.len() {
        return Err(StatsError::SingleClass);
    }
    design.check_rank()?;

    let x = design.matrix();
    let p = design.columns.len();
    let mut beta = DVector::zeros(p);
    let mut current = evaluate(&x, y, &beta);
    let mut converged = false;
    let mut separation = false;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;

    while iterations < MAX_IRLS_ITERATIONS {
        if current.score.amax() < SCORE_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match current.information.clone().cholesky() {
            Some(c) => c.solve(&current.score),
            None => match current.information.clone().lu().solve(&current.score) {
                Some(s) => s,
                None => {
                    separation = true;
                    break;
                }
            },
        };
        let mut scale = 1.0;
        let mut candidate;
        let mut next;
        loop {
            candidate = &beta + &step * scale;
            next = evaluate(&x, y, &candidate);
            if next.deviance <= current.deviance + 1e-12 * current.deviance.abs() || scale < 1e-9 {
                break;
            }
            scale *= 0.5;
        }
        let step_norm = (&step * scale).amax();
        let change = (current.deviance - next.deviance).abs();
        beta = candidate;
        current = next;
        if beta.amax() > SEPARATION_BETA && step_norm >= last_step {
            separation = true;
            break;
        }
        last_step = step_norm;
        if change < DEVIANCE_TOL {
            converged = true;
            break;
        }
    }
    if beta.amax() > SEPARATION_BETA {
        separation = true;
    }
    let cov = invert_spd(&current.information).ok_or(StatsError::SingularInformation)?;
    Ok(LogisticFit {
        names: design.names.clone(),
        beta: beta.iter().copied().collect(),
        covariance: (0..p).map(|i| (0..p).map(|j| cov[(i, j)]).collect()).collect(),
        iterations,
        converged,
        separation,
        deviance: current.deviance,
        max_abs_score: current.score.amax(),
    })
}

/// Two-sided Wald p-value for `z`.
pub fn wald_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitResult {
    pub feature: String,
    /// Log-odds per SD (per unit for binary inputs).
    pub beta: f64,
    /// Standard error on the log-odds scale.
    pub se: f64,
    pub odds_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub p_fdr: f64,
    pub significant: bool,
    pub separation: bool,
}

impl LogitResult {
    fn from_coefficient(feature: &str, beta: f64, se: f64, separation: bool) -> Self {
        LogitResult {
            feature: feature.to_string(),
            beta,
            se,
            odds_ratio: beta.exp(),
            ci_low: (beta - Z_95 * se).exp(),
            ci_high: (beta + Z_95 * se).exp(),
            p_value: wald_p(beta / se),
            p_fdr: f64::NAN,
            significant: false,
            separation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenFailure {
    pub feature: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenResult {
    /// Successful fits in ranking order, FDR-adjusted across themselves.
    pub results: Vec<LogitResult>,
    pub failures: Vec<ScreenFailure>,
}

const SCREEN_CONFOUNDERS: [&str; 4] = ["sex", "age", "bmi", "contrast"];

/// Design `[1, feature, sex, age, bmi, contrast]` for one ranked input. A
/// ranked confounder appears once; confounders constant in this cohort are
/// left out.
pub fn screen_design(cohort: &StandardizedCohort, feature: &str) -> Result<Design, StatsError> {
    let n = cohort.len();
    let mut names = vec!["intercept".to_string(), feature.to_string()];
    let mut columns = vec![
        vec![1.0; n],
        cohort
            .column(feature)
            .ok_or_else(|| StatsError::UnknownFeature(feature.to_string()))?,
    ];
    for c in SCREEN_CONFOUNDERS {
        if c == feature || cohort.is_constant(c) {
            continue;
        }
        names.push(c.to_string());
        columns.push(cohort.column(c).expect("confounder column"));
    }
    Ok(Design { names, columns })
}

/// One adjusted logistic model per ranked input on the whole cohort, then
/// Benjamini-Hochberg across the successful fits.
pub fn univariate_screen(cohort: &StandardizedCohort, ranking: &FeatureRanking, alpha: f64) -> ScreenResult {
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for entry in &ranking.entries {
        let outcome = screen_design(cohort, &entry.name)
            .and_then(|d| fit_logistic(&d, &cohort.labels))
            .map(|fit| LogitResult::from_coefficient(&entry.name, fit.beta[1], fit.se(1), fit.separation));
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => failures.push(ScreenFailure {
                feature: entry.name.clone(),
                error: e.to_string(),
            }),
        }
    }
    let raw: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    if let Ok(adjusted) = bh_adjust(&raw) {
        for (r, q) in results.iter_mut().zip(adjusted) {
            r.p_fdr = q;
            r.significant = q < alpha;
        }
    }
    ScreenResult { results, failures }
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p: &[f64]) -> Result<Vec<f64>, StatsError> {
    if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(StatsError::InvalidPValue(bad));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = f64::INFINITY;
    for rank in (1..=m).rev() {
        let i = order[rank - 1];
        // at rank m the factor is exactly 1; p * m / m can round below p
        let candidate = if rank == m { p[i] } else { p[i] * m as f64 / rank as f64 };
        running = running.min(candidate);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}

/// Writes `feature,OR,SE,CI_low,CI_high,p_value,p_fdr,significant`.
pub fn write_logit_table<W: Write>(results: &[LogitResult], writer: W) -> Result<(), StatsError> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["feature", "OR", "SE", "CI_low", "CI_high", "p_value", "p_fdr", "significant"])?;
    for r in results {
        csv.write_record([
            r.feature.clone(),
            r.odds_ratio.to_string(),
            r.se.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.p_value.to_string(),
            r.p_fdr.to_string(),
            r.significant.to_string(),
        ])?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OddsSign {
    Above,
    Below,
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceRow {
    pub feature: String,
    pub odds_ratio: f64,
    pub or_sign: OddsSign,
    pub direction: Direction,
    /// `None` when either sign is undetermined.
    pub agree: Option<bool>,
    pub significant: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcordanceSummary {
    pub agreed: usize,
    pub disagreed: usize,
    pub indeterminate: usize,
    pub significant_agreed: usize,
    pub significant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceTable {
    pub rows: Vec<ConcordanceRow>,
    pub summary: ConcordanceSummary,
}

/// Compares each odds ratio's side of 1 with the SHAP direction.
pub fn concordance(results: &[LogitResult], ranking: &FeatureRanking) -> Result<ConcordanceTable, StatsError> {
    let mut rows = Vec::with_capacity(results.len());
    let mut summary = ConcordanceSummary::default();
    for r in results {
        let ranked = ranking
            .get(&r.feature)
            .ok_or_else(|| StatsError::FeatureMismatch(r.feature.clone()))?;
        let or_sign = if r.odds_ratio > 1.0 {
            OddsSign::Above
        } else if r.odds_ratio < 1.0 {
            OddsSign::Below
        } else {
            OddsSign::Null
        };
        let agree = match (or_sign, ranked.direction) {
            (OddsSign::Null, _) | (_, Direction::Indeterminate) => None,
            (OddsSign::Above, d) => Some(d == Direction::Risk),
            (OddsSign::Below, d) => Some(d == Direction::Protective),
        };
        match agree {
            Some(true) => {
                summary.agreed += 1;
                if r.significant {
                    summary.significant_agreed += 1;
                }
            }
            Some(false) => summary.disagreed += 1,
            None => summary.indeterminate += 1,
        }
        if r.significant {
            summary.significant += 1;
        }
        rows.push(ConcordanceRow {
            feature: r.feature.clone(),
            odds_ratio: r.odds_ratio,
            or_sign,
            direction: ranked.direction,
            agree,
            significant: r.significant,
        });
    }
    Ok(ConcordanceTable { rows, summary })
}
