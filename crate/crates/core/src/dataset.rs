//! Cohort data model, CSV interchange, BMI stratification, feature scaling and
//! composite-stratified fold assignment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const STRUCTURES: [&str; 8] = [
    "pancreas",
    "liver",
    "spleen",
    "kidney_right",
    "kidney_left",
    "visceral_fat",
    "subcutaneous_fat",
    "skeletal_muscle",
];

pub const MEASUREMENTS: [&str; 11] = [
    "volume_mm3",
    "shape_SurfaceArea",
    "shape_SurfaceVolumeRatio",
    "shape_Elongation",
    "shape_Flatness",
    "shape_Sphericity",
    "shape_MajorAxisLength",
    "shape_LeastAxisLength",
    "shape_MinorAxisLength",
    "shape_Maximum3DDiameter",
    "intensity_median",
];

/// Model inputs appended after the anatomical features, in this order.
pub const CONFOUNDER_INPUTS: [&str; 4] = ["sex", "age", "bmi", "contrast"];

/// Leading metadata columns of the cohort CSV.
pub const META_COLUMNS: [&str; 6] = ["id", "sex", "age", "bmi", "contrast", "label"];

pub const MIN_AGE: f64 = 20.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("record `{id}`, column `{column}`: {reason} (got `{value}`)")]
    Cell {
        id: String,
        column: String,
        value: String,
        reason: String,
    },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("bmi must be positive, got {0}")]
    NonPositiveBmi(f64),
    #[error("need at least {needed} records, found {found}")]
    TooFewRecords { needed: usize, found: usize },
    #[error("fold count must be at least 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("record `{id}` has {found} features, schema expects {expected}")]
    FeatureArity {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Structure x measurement naming of the anatomical features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub structures: Vec<String>,
    pub measurements: Vec<String>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            structures: STRUCTURES.iter().map(|s| s.to_string()).collect(),
            measurements: MEASUREMENTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl FeatureSchema {
    /// Feature names, structure-major: `pancreas_volume_mm3`, `pancreas_shape_SurfaceArea`, ...
    pub fn names(&self) -> Vec<String> {
        self.structures
            .iter()
            .flat_map(|s| self.measurements.iter().map(move |m| format!("{s}_{m}")))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.structures.len() * self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n == name)
    }

    /// Feature names followed by the confounder inputs.
    pub fn input_names(&self) -> Vec<String> {
        let mut names = self.names();
        names.extend(CONFOUNDER_INPUTS.iter().map(|s| s.to_string()));
        names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl Sex {
    /// Numeric model encoding: F = 0, M = 1.
    pub fn code(self) -> f64 {
        match self {
            Sex::F => 0.0,
            Sex::M => 1.0,
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::F => "F",
            Sex::M => "M",
        })
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "F" => Ok(Sex::F),
            "M" => Ok(Sex::M),
            other => Err(format!("expected F or M, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confounders {
    pub sex: Sex,
    pub age: f64,
    pub bmi: f64,
    pub contrast: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    /// Anatomical features in schema order.
    pub features: Vec<f64>,
    pub confounders: Confounders,
    /// `true` for type 2 diabetes.
    pub label: bool,
}

impl PatientRecord {
    /// The model input vector: features, then sex, age, bmi, contrast.
    pub fn input_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.features.len() + CONFOUNDER_INPUTS.len());
        v.extend_from_slice(&self.features);
        v.push(self.confounders.sex.code());
        v.push(self.confounders.age);
        v.push(self.confounders.bmi);
        v.push(if self.confounders.contrast { 1.0 } else { 0.0 });
        v
    }

    pub fn label_f64(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortName {
    All,
    Lean,
    Overweight,
    Obese,
}

impl CohortName {
    pub const ALL: [CohortName; 4] = [
        CohortName::All,
        CohortName::Lean,
        CohortName::Overweight,
        CohortName::Obese,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CohortName::All => "all",
            CohortName::Lean => "lean",
            CohortName::Overweight => "overweight",
            CohortName::Obese => "obese",
        }
    }
}

impl fmt::Display for CohortName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CohortName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "all" => Ok(CohortName::All),
            "lean" => Ok(CohortName::Lean),
            "overweight" => Ok(CohortName::Overweight),
            "obese" => Ok(CohortName::Obese),
            other => Err(format!("unknown cohort `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub name: CohortName,
    pub schema: FeatureSchema,
    pub records: Vec<PatientRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_cases(&self) -> usize {
        self.records.iter().filter(|r| r.label).count()
    }

    /// Non-empty with both label classes present.
    pub fn is_modelable(&self) -> bool {
        let cases = self.n_cases();
        cases > 0 && cases < self.len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn input_names(&self) -> Vec<String> {
        self.schema.input_names()
    }

    /// Row-major model inputs, one row per record.
    pub fn input_matrix(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(PatientRecord::input_vector).collect()
    }

    /// Same schema and name, restricted to the given record indices.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            name: self.name,
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

fn cell_error(id: &str, column: &str, value: &str, reason: impl Into<String>) -> DatasetError {
    DatasetError::Cell {
        id: id.to_string(),
        column: column.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_finite(id: &str, column: &str, raw: &str) -> Result<f64, DatasetError> {
    let value: f64 = raw
        .trim()
        .parse()
        .map_err(|_| cell_error(id, column, raw, "not a number"))?;
    if !value.is_finite() {
        return Err(cell_error(id, column, raw, "non-finite value"));
    }
    Ok(value)
}

fn parse_flag(id: &str, column: &str, raw: &str) -> Result<bool, DatasetError> {
    match raw.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(cell_error(id, column, raw, "expected 0 or 1")),
    }
}

/// Parses a comma-separated cohort table with a header row.
///
/// Columns are located by header name, so their order is free; unknown extra
/// columns are ignored. Records keep their input order.
pub fn parse_cohort<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Cohort, DatasetError> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv.headers()?.clone();

    let mut position: HashMap<&str, usize> = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if position.insert(h, i).is_some() {
            return Err(DatasetError::DuplicateColumn(h.to_string()));
        }
    }
    let locate = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let meta: Vec<usize> = META_COLUMNS
        .iter()
        .map(|c| locate(c))
        .collect::<Result<_, _>>()?;
    let feature_names = schema.names();
    let feature_cols: Vec<usize> = feature_names
        .iter()
        .map(|c| locate(c))
        .collect::<Result<_, _>>()?;

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in csv.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let id = field(meta[0]).trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        let sex = field(meta[1])
            .parse::<Sex>()
            .map_err(|e| cell_error(&id, "sex", field(meta[1]), e))?;
        let age = parse_finite(&id, "age", field(meta[2]))?;
        if age < MIN_AGE {
            return Err(cell_error(&id, "age", field(meta[2]), "age below 20"));
        }
        let bmi = parse_finite(&id, "bmi", field(meta[3]))?;
        if bmi <= 0.0 {
            return Err(cell_error(&id, "bmi", field(meta[3]), "bmi must be positive"));
        }
        let contrast = parse_flag(&id, "contrast", field(meta[4]))?;
        let label = parse_flag(&id, "label", field(meta[5]))?;
        let features = feature_cols
            .iter()
            .zip(&feature_names)
            .map(|(&col, name)| parse_finite(&id, name, field(col)))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(PatientRecord {
            id,
            features,
            confounders: Confounders {
                sex,
                age,
                bmi,
                contrast,
            },
            label,
        });
    }
    Ok(Cohort {
        name: CohortName::All,
        schema: schema.clone(),
        records,
    })
}

/// Writes a cohort in the canonical column order `id,sex,age,bmi,contrast,label,<features>`.
///
/// Reals use the shortest representation that round-trips, so parse(write(c)) == c.
pub fn write_cohort<W: Write>(cohort: &Cohort, writer: W) -> Result<(), DatasetError> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(cohort.schema.names());
    csv.write_record(&header)?;
    for r in &cohort.records {
        if r.features.len() != cohort.schema.len() {
            return Err(DatasetError::FeatureArity {
                id: r.id.clone(),
                expected: cohort.schema.len(),
                found: r.features.len(),
            });
        }
        let mut row = vec![
            r.id.clone(),
            r.confounders.sex.to_string(),
            r.confounders.age.to_string(),
            r.confounders.bmi.to_string(),
            u8::from(r.confounders.contrast).to_string(),
            u8::from(r.label).to_string(),
        ];
        row.extend(r.features.iter().map(|v| v.to_string()));
        csv.write_record(&row)?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BmiClass {
    Lean,
    Overweight,
    Obese,
}

impl BmiClass {
    pub fn cohort_name(self) -> CohortName {
        match self {
            BmiClass::Lean => CohortName::Lean,
            BmiClass::Overweight => CohortName::Overweight,
            BmiClass::Obese => CohortName::Obese,
        }
    }
}

/// WHO classes: lean below 25, overweight in [25, 30), obese from 30 kg/m².
pub fn bmi_class(bmi: f64) -> Result<BmiClass, DatasetError> {
    if !(bmi > 0.0) {
        return Err(DatasetError::NonPositiveBmi(bmi));
    }
    Ok(if bmi < 25.0 {
        BmiClass::Lean
    } else if bmi < 30.0 {
        BmiClass::Overweight
    } else {
        BmiClass::Obese
    })
}

#[derive(Debug, Clone)]
pub struct Strata {
    pub all: Cohort,
    pub lean: Cohort,
    pub overweight: Cohort,
    pub obese: Cohort,
}

impl Strata {
    pub fn get(&self, name: CohortName) -> &Cohort {
        match name {
            CohortName::All => &self.all,
            CohortName::Lean => &self.lean,
            CohortName::Overweight => &self.overweight,
            CohortName::Obese => &self.obese,
        }
    }
}

/// Splits a cohort into the four analysis cohorts. `all` is the input itself.
pub fn stratify_by_bmi(cohort: &Cohort) -> Result<Strata, DatasetError> {
    let empty = |name| Cohort {
        name,
        schema: cohort.schema.clone(),
        records: Vec::new(),
    };
    let mut lean = empty(CohortName::Lean);
    let mut overweight = empty(CohortName::Overweight);
    let mut obese = empty(CohortName::Obese);
    for r in &cohort.records {
        let bucket = match bmi_class(r.confounders.bmi)? {
            BmiClass::Lean => &mut lean,
            BmiClass::Overweight => &mut overweight,
            BmiClass::Obese => &mut obese,
        };
        bucket.records.push(r.clone());
    }
    let mut all = cohort.clone();
    all.name = CohortName::All;
    Ok(Strata {
        all,
        lean,
        overweight,
        obese,
    })
}

/// Mean and population SD of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub sd: f64,
    pub constant: bool,
}

impl ColumnScale {
    pub fn fit(values: &[f64]) -> ColumnScale {
        let n = values.len() as f64;
        let mut mean = values.iter().sum::<f64>() / n;
        // second pass removes most of the rounding error of the naive mean
        mean += values.iter().map(|v| v - mean).sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let constant = sd == 0.0 || sd <= f64::EPSILON * mean.abs();
        ColumnScale { mean, sd, constant }
    }

    pub fn apply(&self, value: f64) -> f64 {
        if self.constant {
            0.0
        } else {
            (value - self.mean) / self.sd
        }
    }
}

/// Stored standardization parameters for features, age and bmi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub features: Vec<ColumnScale>,
    pub age: ColumnScale,
    pub bmi: ColumnScale,
}

impl Scaler {
    pub fn fit(cohort: &Cohort) -> Result<Scaler, DatasetError> {
        if cohort.len() < 2 {
            return Err(DatasetError::TooFewRecords {
                needed: 2,
                found: cohort.len(),
            });
        }
        let p = cohort.schema.len();
        let features = (0..p)
            .map(|j| {
                let col: Vec<f64> = cohort.records.iter().map(|r| r.features[j]).collect();
                ColumnScale::fit(&col)
            })
            .collect();
        let ages: Vec<f64> = cohort.records.iter().map(|r| r.confounders.age).collect();
        let bmis: Vec<f64> = cohort.records.iter().map(|r| r.confounders.bmi).collect();
        Ok(Scaler {
            features,
            age: ColumnScale::fit(&ages),
            bmi: ColumnScale::fit(&bmis),
        })
    }

    pub fn transform(&self, cohort: &Cohort) -> StandardizedCohort {
        let features = cohort
            .records
            .iter()
            .map(|r| {
                r.features
                    .iter()
                    .zip(&self.features)
                    .map(|(&v, s)| s.apply(v))
                    .collect()
            })
            .collect();
        StandardizedCohort {
            name: cohort.name,
            feature_names: cohort.schema.names(),
            ids: cohort.ids(),
            features,
            sex: cohort.records.iter().map(|r| r.confounders.sex.code()).collect(),
            age: cohort.records.iter().map(|r| self.age.apply(r.confounders.age)).collect(),
            bmi: cohort.records.iter().map(|r| self.bmi.apply(r.confounders.bmi)).collect(),
            contrast: cohort
                .records
                .iter()
                .map(|r| if r.confounders.contrast { 1.0 } else { 0.0 })
                .collect(),
            labels: cohort.records.iter().map(PatientRecord::label_f64).collect(),
            constant: self.features.iter().map(|s| s.constant).collect(),
            age_constant: self.age.constant,
            bmi_constant: self.bmi.constant,
        }
    }
}

/// Regression-ready view of a cohort: z-scored features, age and bmi; binary
/// sex and contrast left as 0/1.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedCohort {
    pub name: CohortName,
    pub feature_names: Vec<String>,
    pub ids: Vec<String>,
    /// Row-major, one row per record.
    pub features: Vec<Vec<f64>>,
    pub sex: Vec<f64>,
    pub age: Vec<f64>,
    pub bmi: Vec<f64>,
    pub contrast: Vec<f64>,
    pub labels: Vec<f64>,
    pub constant: Vec<bool>,
    pub age_constant: bool,
    pub bmi_constant: bool,
}

impl StandardizedCohort {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Column by model-input name (any feature or confounder).
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        match name {
            "sex" => Some(self.sex.clone()),
            "age" => Some(self.age.clone()),
            "bmi" => Some(self.bmi.clone()),
            "contrast" => Some(self.contrast.clone()),
            _ => {
                let j = self.feature_names.iter().position(|n| n == name)?;
                Some(self.features.iter().map(|row| row[j]).collect())
            }
        }
    }

    /// Whether an input had zero variance in the fitted data. Binary inputs
    /// count as constant when only one level occurs.
    pub fn is_constant(&self, name: &str) -> bool {
        match name {
            "age" => self.age_constant,
            "bmi" => self.bmi_constant,
            "sex" | "contrast" => self
                .column(name)
                .map(|c| c.iter().all(|&v| v == c[0]))
                .unwrap_or(true),
            _ => self
                .feature_names
                .iter()
                .position(|n| n == name)
                .map(|j| self.constant[j])
                .unwrap_or(true),
        }
    }
}

/// Fits a scaler on the cohort and applies it.
pub fn standardize_features(cohort: &Cohort) -> Result<(StandardizedCohort, Scaler), DatasetError> {
    let scaler = Scaler::fit(cohort)?;
    Ok((scaler.transform(cohort), scaler))
}

/// Composite cross-validation stratum: label, sex, age decade, contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub label: bool,
    pub sex: Sex,
    pub decade: u32,
    pub contrast: bool,
}

pub fn stratification_key(record: &PatientRecord) -> StratumKey {
    StratumKey {
        label: record.label,
        sex: record.confounders.sex,
        decade: ((record.confounders.age / 10.0).floor() * 10.0) as u32,
        contrast: record.confounders.contrast,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub ids: Vec<String>,
    /// Fold index per record, aligned with `ids` (cohort order).
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id).map(|p| self.folds[p])
    }

    pub fn validation_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn training_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Assigns records to `k` folds within composite strata.
///
/// Strata are visited in key order; each is shuffled and dealt round-robin,
/// with the dealing position carried over between strata so that overall fold
/// sizes also stay within one of each other.
pub fn stratified_kfold(cohort: &Cohort, k: usize, seed: u64) -> Result<FoldAssignment, DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidFoldCount(k));
    }
    if cohort.len() < k {
        return Err(DatasetError::TooFewRecords {
            needed: k,
            found: cohort.len(),
        });
    }
    let mut strata: BTreeMap<StratumKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in cohort.records.iter().enumerate() {
        strata.entry(stratification_key(r)).or_default().push(i);
    }
    let mut rng = seed::rng_from(seed);
    let mut folds = vec![0usize; cohort.len()];
    let mut next = 0usize;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment {
        k,
        ids: cohort.ids(),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: bool, sex: Sex, age: f64, bmi: f64, contrast: bool) -> PatientRecord {
        PatientRecord {
            id: id.to_string(),
            features: vec![1.0; 88],
            confounders: Confounders {
                sex,
                age,
                bmi,
                contrast,
            },
            label,
        }
    }

    fn table(rows: usize, mutate: impl Fn(&mut Vec<String>, &mut Vec<Vec<String>>)) -> String {
        let schema = FeatureSchema::default();
        let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend(schema.names());
        let mut body: Vec<Vec<String>> = (0..rows)
            .map(|i| {
                let mut row = vec![
                    format!("p{i}"),
                    if i % 2 == 0 { "F".into() } else { "M".into() },
                    format!("{}", 30 + i),
                    format!("{}", 22.5 + i as f64),
                    "1".into(),
                    format!("{}", i % 2),
                ];
                row.extend((0..88).map(|j| format!("{}.5", i * 100 + j)));
                row
            })
            .collect();
        mutate(&mut header, &mut body);
        let mut out = header.join(",");
        out.push('\n');
        for row in body {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    #[test]
    fn schema_has_88_unique_names() {
        let names = FeatureSchema::default().names();
        assert_eq!(names.len(), 88);
        let unique: HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), 88);
        assert!(names.contains(&"skeletal_muscle_intensity_median".to_string()));
        assert_eq!(names[0], "pancreas_volume_mm3");
        assert_eq!(FeatureSchema::default().input_names().len(), 92);
    }

    #[test]
    fn parses_rows_in_order() {
        let text = table(3, |_, _| {});
        let cohort = parse_cohort(text.as_bytes(), &FeatureSchema::default()).unwrap();
        assert_eq!(cohort.ids(), vec!["p0", "p1", "p2"]);
        assert_eq!(cohort.records[1].confounders.sex, Sex::M);
        assert_eq!(cohort.records[2].features[3], 203.5);
        assert!(cohort.records[1].label);
    }

    #[test]
    fn missing_feature_column_is_named() {
        let text = table(3, |h, b| {
            let j = h.iter().position(|c| c == "pancreas_volume_mm3").unwrap();
            h.remove(j);
            for row in b.iter_mut() {
                row.remove(j);
            }
        });
        let err = parse_cohort(text.as_bytes(), &FeatureSchema::default()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingColumn(ref c) if c == "pancreas_volume_mm3"));
    }

    #[test]
    fn nan_cell_cites_id_and_column() {
        let text = table(3, |h, b| {
            let j = h.iter().position(|c| c == "liver_intensity_median").unwrap();
            b[1][j] = "NaN".into();
        });
        match parse_cohort(text.as_bytes(), &FeatureSchema::default()).unwrap_err() {
            DatasetError::Cell { id, column, .. } => {
                assert_eq!(id, "p1");
                assert_eq!(column, "liver_intensity_median");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = table(3, |_, b| b[2][0] = "p0".into());
        assert!(matches!(
            parse_cohort(text.as_bytes(), &FeatureSchema::default()),
            Err(DatasetError::DuplicateId(_))
        ));
    }

    #[test]
    fn write_then_parse_round_trips() {
        let text = table(4, |_, _| {});
        let cohort = parse_cohort(text.as_bytes(), &FeatureSchema::default()).unwrap();
        let mut buf = Vec::new();
        write_cohort(&cohort, &mut buf).unwrap();
        let again = parse_cohort(buf.as_slice(), &FeatureSchema::default()).unwrap();
        assert_eq!(cohort, again);
    }

    #[test]
    fn bmi_class_boundaries() {
        assert_eq!(bmi_class(24.9).unwrap(), BmiClass::Lean);
        assert_eq!(bmi_class(25.0).unwrap(), BmiClass::Overweight);
        assert_eq!(bmi_class(29.999).unwrap(), BmiClass::Overweight);
        assert_eq!(bmi_class(30.0).unwrap(), BmiClass::Obese);
        assert!(bmi_class(0.0).is_err());
        assert!(bmi_class(-3.0).is_err());
    }

    #[test]
    fn stratification_partitions_and_echoes_paper_sizes() {
        let mut records = Vec::new();
        for i in 0..1728 {
            let bmi = if i < 497 {
                22.0
            } else if i < 497 + 611 {
                27.0
            } else {
                33.0
            };
            records.push(record(&format!("r{i}"), i % 3 == 0, Sex::F, 50.0, bmi, false));
        }
        let cohort = Cohort {
            name: CohortName::All,
            schema: FeatureSchema::default(),
            records,
        };
        let s = stratify_by_bmi(&cohort).unwrap();
        assert_eq!((s.lean.len(), s.overweight.len(), s.obese.len()), (497, 611, 620));
        assert_eq!(s.lean.len() + s.overweight.len() + s.obese.len(), s.all.len());
        assert_eq!(s.lean.records[0].id, "r0");
    }

    #[test]
    fn all_lean_leaves_other_strata_empty() {
        let records = (0..10)
            .map(|i| record(&format!("r{i}"), i % 2 == 0, Sex::M, 40.0, 22.0, true))
            .collect();
        let cohort = Cohort {
            name: CohortName::All,
            schema: FeatureSchema::default(),
            records,
        };
        let s = stratify_by_bmi(&cohort).unwrap();
        assert_eq!(s.lean.len(), 10);
        assert!(s.overweight.is_empty() && s.obese.is_empty());
        assert!(!s.obese.is_modelable());
        assert!(s.lean.is_modelable());
    }

    #[test]
    fn z_score_hand_values() {
        let s = ColumnScale::fit(&[1.0, 2.0, 3.0]);
        let z: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&v| s.apply(v)).collect();
        assert!((z[0] + 1.224744871391589).abs() < 1e-12);
        assert_eq!(z[1], 0.0);
        assert!((z[2] - 1.224744871391589).abs() < 1e-12);

        let c = ColumnScale::fit(&[5.0, 5.0, 5.0]);
        assert!(c.constant);
        assert_eq!(c.apply(5.0), 0.0);
    }

    #[test]
    fn scaler_reapplies_bit_for_bit() {
        let records = (0..20)
            .map(|i| {
                let mut r = record(&format!("r{i}"), i % 2 == 0, Sex::M, 20.0 + i as f64 * 3.1, 18.0 + i as f64, true);
                r.features = (0..88).map(|j| (i * j) as f64 * 0.37 + 1e5).collect();
                r
            })
            .collect();
        let cohort = Cohort {
            name: CohortName::All,
            schema: FeatureSchema::default(),
            records,
        };
        let (std, scaler) = standardize_features(&cohort).unwrap();
        assert_eq!(scaler.transform(&cohort), std);
        // column 0 is i*0 -> constant
        assert!(std.constant[0]);
        assert!(std.is_constant("pancreas_volume_mm3"));
        assert!(std.is_constant("sex"));
        assert!(!std.is_constant("age"));
        for j in 1..88 {
            let col: Vec<f64> = std.features.iter().map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / 20.0;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 20.0).sqrt();
            assert!(m.abs() < 1e-12, "mean {m}");
            assert!((sd - 1.0).abs() < 1e-12, "sd {sd}");
        }
    }

    #[test]
    fn stratum_key_floor_decade() {
        let r = record("a", true, Sex::F, 47.0, 22.0, true);
        let k = stratification_key(&r);
        assert_eq!((k.label, k.sex, k.decade, k.contrast), (true, Sex::F, 40, true));
        let d = |age| stratification_key(&record("a", true, Sex::F, age, 22.0, true)).decade;
        assert_eq!(d(40.0), d(49.0));
        assert_ne!(d(39.0), d(40.0));
        let other = stratification_key(&record("a", true, Sex::F, 47.0, 22.0, false));
        assert_ne!(k, other);
    }

    #[test]
    fn single_stratum_divides_evenly() {
        let records = (0..100)
            .map(|i| record(&format!("r{i}"), true, Sex::F, 45.0, 22.0, true))
            .collect();
        let cohort = Cohort {
            name: CohortName::All,
            schema: FeatureSchema::default(),
            records,
        };
        let folds = stratified_kfold(&cohort, 10, 3).unwrap();
        for f in 0..10 {
            assert_eq!(folds.validation_indices(f).len(), 10);
        }
        assert_eq!(folds, stratified_kfold(&cohort, 10, 3).unwrap());
    }

    #[test]
    fn small_stratum_is_dealt_without_error() {
        let mut records: Vec<_> = (0..7)
            .map(|i| record(&format!("s{i}"), true, Sex::F, 45.0, 22.0, true))
            .collect();
        records.extend((0..10).map(|i| record(&format!("o{i}"), false, Sex::M, 61.0, 22.0, false)));
        let cohort = Cohort {
            name: CohortName::All,
            schema: FeatureSchema::default(),
            records,
        };
        let folds = stratified_kfold(&cohort, 10, 11).unwrap();
        let mut per_fold = [0usize; 10];
        for i in 0..7 {
            per_fold[folds.folds[i]] += 1;
        }
        assert_eq!(per_fold.iter().filter(|&&c| c == 1).count(), 7);
        assert_eq!(per_fold.iter().filter(|&&c| c == 0).count(), 3);
    }

    #[test]
    fn fold_errors() {
        let cohort = Cohort {
            name: CohortName::All,
            schema: FeatureSchema::default(),
            records: vec![record("a", true, Sex::F, 30.0, 22.0, true)],
        };
        assert!(stratified_kfold(&cohort, 1, 0).is_err());
        assert!(stratified_kfold(&cohort, 2, 0).is_err());
    }
}
