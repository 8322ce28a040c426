//! Explainable random-forest phenotyping of tabular body-composition cohorts.
//!
//! The crate runs a fixed analysis chain per BMI stratum: stratified
//! cross-validated random forests, exact TreeSHAP attributions, confounder
//! adjusted logistic screens with Benjamini-Hochberg control, and a
//! UMAP + K-means view of the model's decision space whose clusters are
//! described by one-vs-rest signature forests.
//!
//! A synthetic generator with planted effects provides ground truth for
//! every stage.

pub mod dataset;
pub mod embed;
pub mod forest;
pub mod phenotype;
pub mod report;
pub mod seed;
pub mod shap;
pub mod stats;
pub mod synth;

pub use dataset::{Cohort, CohortName, FeatureSchema, PatientRecord};
pub use forest::{ForestConfig, ForestModel};
pub use shap::ShapMatrix;
