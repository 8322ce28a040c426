//! Synthetic cohorts with planted label effects and planted subpopulations.
//!
//! Features are Gaussian per subpopulation; labels follow a logistic model
//! whose linear predictor sums signed effect strengths times population
//! z-scores, with the intercept solved by bisection so that the mean
//! predicted risk hits the target prevalence.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ColumnScale, Cohort, CohortName, Confounders, FeatureSchema, PatientRecord, Sex};
use crate::seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{pointer}: {message}")]
    Invalid { pointer: String, message: String },
    #[error("{pointer}: {message}")]
    Parse { pointer: String, message: String },
}

fn invalid(pointer: impl Into<String>, message: impl Into<String>) -> SynthError {
    SynthError::Invalid {
        pointer: pointer.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectDirection {
    Risk,
    Protective,
}

impl EffectDirection {
    pub fn sign(self) -> f64 {
        match self {
            EffectDirection::Risk => 1.0,
            EffectDirection::Protective => -1.0,
        }
    }
}

/// Log-odds shift per population SD of one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub feature: String,
    pub direction: EffectDirection,
    pub strength: f64,
}

/// Mixture component: weight plus per-feature mean shifts in within-group SD units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subpopulation {
    pub weight: f64,
    #[serde(default)]
    pub shifts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfounderDistribution {
    pub age_min: f64,
    pub age_max: f64,
    pub female_fraction: f64,
    pub bmi_mean: f64,
    pub bmi_sd: f64,
    pub bmi_min: f64,
    pub contrast_fraction: f64,
}

impl Default for ConfounderDistribution {
    fn default() -> Self {
        Self {
            age_min: 20.0,
            age_max: 85.0,
            female_fraction: 0.5,
            bmi_mean: 27.5,
            bmi_sd: 5.5,
            bmi_min: 15.0,
            contrast_fraction: 0.6,
        }
    }
}

fn default_noise() -> f64 {
    1.0
}
fn default_prevalence() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub n: usize,
    #[serde(default)]
    pub effects: Vec<PlantedEffect>,
    #[serde(default)]
    pub cluster_spec: Option<Vec<Subpopulation>>,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prevalence")]
    pub prevalence: f64,
    #[serde(default)]
    pub confounders: ConfounderDistribution,
}

const CONFOUNDER_NAMES: [&str; 4] = ["sex", "age", "bmi", "contrast"];

impl SynthManifest {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            effects: Vec::new(),
            cluster_spec: None,
            noise_sd: default_noise(),
            seed,
            prevalence: default_prevalence(),
            confounders: ConfounderDistribution::default(),
        }
    }

    /// Parses and validates a JSON manifest; errors carry JSON-pointer paths.
    pub fn from_json(text: &str) -> Result<SynthManifest, SynthError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let manifest: SynthManifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            SynthError::Parse {
                pointer,
                message: e.into_inner().to_string(),
            }
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n < 50 {
            return Err(invalid("/n", format!("need at least 50 records, got {}", self.n)));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(invalid("/noise_sd", "must be positive"));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(invalid("/prevalence", "must lie strictly between 0 and 1"));
        }
        let names = FeatureSchema::default().names();
        let known = |f: &str| names.iter().any(|n| n == f) || CONFOUNDER_NAMES.contains(&f);
        for (i, e) in self.effects.iter().enumerate() {
            if !known(&e.feature) {
                return Err(invalid(format!("/effects/{i}/feature"), format!("unknown input `{}`", e.feature)));
            }
            if !(e.strength >= 0.0 && e.strength.is_finite()) {
                return Err(invalid(format!("/effects/{i}/strength"), "must be finite and >= 0"));
            }
        }
        if let Some(spec) = &self.cluster_spec {
            if spec.is_empty() {
                return Err(invalid("/cluster_spec", "zero subpopulations"));
            }
            for (i, s) in spec.iter().enumerate() {
                if !(s.weight >= 0.0 && s.weight.is_finite()) {
                    return Err(invalid(format!("/cluster_spec/{i}/weight"), "must be finite and >= 0"));
                }
                for (f, shift) in &s.shifts {
                    if !names.iter().any(|n| n == f) {
                        return Err(invalid(format!("/cluster_spec/{i}/shifts/{f}"), "unknown feature"));
                    }
                    if !shift.is_finite() {
                        return Err(invalid(format!("/cluster_spec/{i}/shifts/{f}"), "must be finite"));
                    }
                }
            }
            let total: f64 = spec.iter().map(|s| s.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(invalid("/cluster_spec", format!("mixing weights sum to {total}, expected 1")));
            }
        }
        let c = &self.confounders;
        if !(c.age_min >= 20.0 && c.age_max > c.age_min) {
            return Err(invalid("/confounders/age_min", "need 20 <= age_min < age_max"));
        }
        for (name, v) in [("female_fraction", c.female_fraction), ("contrast_fraction", c.contrast_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("/confounders/{name}"), "must lie in [0, 1]"));
            }
        }
        if !(c.bmi_sd > 0.0 && c.bmi_min > 0.0) {
            return Err(invalid("/confounders/bmi_sd", "bmi_sd and bmi_min must be positive"));
        }
        Ok(())
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Ground truth emitted next to a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub effects: Vec<PlantedEffect>,
    /// Subpopulation index per record, cohort order.
    pub cluster_labels: Vec<usize>,
    pub intercept: f64,
    pub target_prevalence: f64,
    pub realized_prevalence: f64,
}

/// Nominal mean and SD of a feature in the base population.
pub fn base_distribution(structure: &str, measurement: &str) -> (f64, f64) {
    let (volume, vol_sd, intensity, int_sd): (f64, f64, f64, f64) = match structure {
        "pancreas" => (80_000.0, 20_000.0, 35.0, 15.0),
        "liver" => (1_600_000.0, 300_000.0, 55.0, 15.0),
        "spleen" => (200_000.0, 70_000.0, 50.0, 10.0),
        "kidney_right" | "kidney_left" => (170_000.0, 35_000.0, 40.0, 20.0),
        "visceral_fat" => (2_000_000.0, 900_000.0, -95.0, 8.0),
        "subcutaneous_fat" => (3_500_000.0, 1_500_000.0, -105.0, 8.0),
        "skeletal_muscle" => (2_500_000.0, 600_000.0, 40.0, 10.0),
        _ => (100_000.0, 20_000.0, 0.0, 10.0),
    };
    let length = volume.cbrt();
    let area = 5.0 * volume.powf(2.0 / 3.0);
    match measurement {
        "volume_mm3" => (volume, vol_sd),
        "shape_SurfaceArea" => (area, 0.15 * area),
        "shape_SurfaceVolumeRatio" => (area / volume, 0.15 * area / volume),
        "shape_Elongation" => (0.65, 0.1),
        "shape_Flatness" => (0.45, 0.08),
        "shape_Sphericity" => (0.6, 0.07),
        "shape_MajorAxisLength" => (1.8 * length, 0.12 * 1.8 * length),
        "shape_LeastAxisLength" => (0.7 * length, 0.12 * 0.7 * length),
        "shape_MinorAxisLength" => (1.1 * length, 0.12 * 1.1 * length),
        "shape_Maximum3DDiameter" => (2.0 * length, 0.12 * 2.0 * length),
        "intensity_median" => (intensity, int_sd),
        _ => (0.0, 1.0),
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Intercept `b` such that mean(sigmoid(b + eta)) is within 1e-4 of `target`.
pub fn solve_intercept(eta: &[f64], target: f64) -> f64 {
    let mean_risk = |b: f64| eta.iter().map(|&e| sigmoid(b + e)).sum::<f64>() / eta.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    let mut mid = 0.0;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let m = mean_risk(mid);
        if (m - target).abs() < 1e-4 {
            break;
        }
        if m < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

/// Generates a cohort and its ground truth. Deterministic in the manifest.
pub fn generate_cohort(manifest: &SynthManifest) -> Result<(Cohort, Truth), SynthError> {
    manifest.validate()?;
    let schema = FeatureSchema::default();
    let names = schema.names();
    let base: Vec<(f64, f64)> = schema
        .structures
        .iter()
        .flat_map(|s| schema.measurements.iter().map(move |m| base_distribution(s, m)))
        .collect();
    let default_spec = vec![Subpopulation {
        weight: 1.0,
        shifts: BTreeMap::new(),
    }];
    let spec = manifest.cluster_spec.as_ref().unwrap_or(&default_spec);
    let shifts: Vec<Vec<f64>> = spec
        .iter()
        .map(|s| names.iter().map(|n| s.shifts.get(n).copied().unwrap_or(0.0)).collect())
        .collect();

    let mut rng = seed::rng_from(seed::derive_seed(manifest.seed, &["synth"]));
    let conf = &manifest.confounders;
    let width = manifest.n.to_string().len().max(5);
    let mut records = Vec::with_capacity(manifest.n);
    let mut cluster_labels = Vec::with_capacity(manifest.n);
    for i in 0..manifest.n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut cluster = spec.len() - 1;
        for (c, s) in spec.iter().enumerate() {
            acc += s.weight;
            if u < acc {
                cluster = c;
                break;
            }
        }
        let sex = if rng.gen::<f64>() < conf.female_fraction {
            Sex::F
        } else {
            Sex::M
        };
        let age = rng.gen_range(conf.age_min..conf.age_max);
        let mut bmi = conf.bmi_min;
        for _ in 0..100 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let draw = conf.bmi_mean + conf.bmi_sd * z;
            if draw >= conf.bmi_min {
                bmi = draw;
                break;
            }
        }
        let contrast = rng.gen::<f64>() < conf.contrast_fraction;
        let features = base
            .iter()
            .zip(&shifts[cluster])
            .map(|(&(mean, sd), &shift)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + sd * (shift + manifest.noise_sd * z)
            })
            .collect();
        records.push(PatientRecord {
            id: format!("S{:0width$}", i + 1),
            features,
            confounders: Confounders {
                sex,
                age,
                bmi,
                contrast,
            },
            label: false,
        });
        cluster_labels.push(cluster);
    }

    let mut eta = vec![0.0; manifest.n];
    for effect in &manifest.effects {
        let column: Vec<f64> = match names.iter().position(|n| *n == effect.feature) {
            Some(j) => records.iter().map(|r| r.features[j]).collect(),
            None => records
                .iter()
                .map(|r| {
                    let v = r.input_vector();
                    let k = CONFOUNDER_NAMES.iter().position(|c| *c == effect.feature).expect("validated");
                    v[names.len() + k]
                })
                .collect(),
        };
        let scale = ColumnScale::fit(&column);
        for (e, v) in eta.iter_mut().zip(&column) {
            *e += effect.direction.sign() * effect.strength * scale.apply(*v);
        }
    }
    let intercept = solve_intercept(&eta, manifest.prevalence);
    for (r, e) in records.iter_mut().zip(&eta) {
        r.label = rng.gen::<f64>() < sigmoid(intercept + e);
    }
    let realized = records.iter().filter(|r| r.label).count() as f64 / manifest.n as f64;
    let cohort = Cohort {
        name: CohortName::All,
        schema,
        records,
    };
    Ok((
        cohort,
        Truth {
            effects: manifest.effects.clone(),
            cluster_labels,
            intercept,
            target_prevalence: manifest.prevalence,
            realized_prevalence: realized,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_manifest() {
        let m = SynthManifest::new(200, 5);
        let (a, ta) = generate_cohort(&m).unwrap();
        let (b, tb) = generate_cohort(&m).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_cohort(&SynthManifest::new(200, 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prevalence_tracks_target() {
        let mut m = SynthManifest::new(4000, 1);
        m.effects.push(PlantedEffect {
            feature: "liver_volume_mm3".into(),
            direction: EffectDirection::Risk,
            strength: 1.0,
        });
        let (cohort, truth) = generate_cohort(&m).unwrap();
        assert!((truth.realized_prevalence - 0.3).abs() < 0.03);
        assert!(cohort.records.iter().all(|r| r.confounders.age >= 20.0 && r.confounders.bmi > 0.0));
    }

    #[test]
    fn intercept_bisection_hits_target() {
        let eta: Vec<f64> = (0..100).map(|i| (i as f64 - 50.0) / 20.0).collect();
        let b = solve_intercept(&eta, 0.25);
        let m = eta.iter().map(|&e| sigmoid(b + e)).sum::<f64>() / 100.0;
        assert!((m - 0.25).abs() < 1e-4);
    }

    #[test]
    fn validation_pointers() {
        let err = SynthManifest::from_json(
            r#"{"n": 100, "cluster_spec": [{"weight": 0.5}, {"weight": 0.4}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, SynthError::Invalid { ref pointer, .. } if pointer == "/cluster_spec"));

        let err = SynthManifest::from_json(r#"{"n": 100, "cluster_spec": []}"#).unwrap_err();
        assert!(matches!(err, SynthError::Invalid { ref pointer, .. } if pointer == "/cluster_spec"));

        let err = SynthManifest::from_json(
            r#"{"n": 100, "effects": [{"feature": "age", "direction": "risk", "strength": "x"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, SynthError::Parse { ref pointer, .. } if pointer == "/effects/0/strength"));

        let err = SynthManifest::from_json(
            r#"{"n": 100, "effects": [{"feature": "nose_volume", "direction": "risk", "strength": 1}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, SynthError::Invalid { ref pointer, .. } if pointer == "/effects/0/feature"));

        let err = SynthManifest::from_json(r#"{"n": 10}"#).unwrap_err();
        assert!(matches!(err, SynthError::Invalid { ref pointer, .. } if pointer == "/n"));
    }

    #[test]
    fn cluster_shift_moves_feature_mean() {
        let mut m = SynthManifest::new(1000, 3);
        let mut shifts = BTreeMap::new();
        shifts.insert("pancreas_volume_mm3".to_string(), 3.0);
        m.cluster_spec = Some(vec![
            Subpopulation {
                weight: 0.5,
                shifts: BTreeMap::new(),
            },
            Subpopulation { weight: 0.5, shifts },
        ]);
        let (cohort, truth) = generate_cohort(&m).unwrap();
        let mean_of = |c: usize| {
            let v: Vec<f64> = cohort
                .records
                .iter()
                .zip(&truth.cluster_labels)
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r.features[0])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let gap = (mean_of(1) - mean_of(0)) / 20_000.0;
        assert!((gap - 3.0).abs() < 0.3, "gap {gap}");
    }
}
