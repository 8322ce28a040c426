mod common;

use std::collections::BTreeMap;

use phenoscope::embed::{Embedding, Initialization};
use phenoscope::forest::ForestConfig;
use phenoscope::phenotype::{cluster_composition, cluster_representative, ovr_signature, PhenotypeError};
use phenoscope::synth::{generate_cohort, Subpopulation, SynthManifest};
use phenoscope::Cohort;

fn config() -> ForestConfig {
    ForestConfig {
        n_trees: 60,
        seed: 4,
        ..ForestConfig::default()
    }
}

/// Places each record on a line by its label so representatives are well defined.
fn line_embedding(cohort: &Cohort, labels: &[usize]) -> Embedding {
    Embedding {
        ids: cohort.ids(),
        coords: labels
            .iter()
            .enumerate()
            .map(|(i, &l)| vec![10.0 * l as f64 + (i % 7) as f64 * 0.1, 0.0])
            .collect(),
        degenerate: false,
        initialization: Initialization::Spectral,
    }
}

fn shifted_cohort(n: usize, feature: &str, shift: f64, seed: u64) -> (Cohort, Vec<usize>) {
    let mut m = SynthManifest::new(n, seed);
    let mut shifts = BTreeMap::new();
    shifts.insert(feature.to_string(), shift);
    m.cluster_spec = Some(vec![
        Subpopulation { weight: 0.5, shifts: BTreeMap::new() },
        Subpopulation { weight: 0.5, shifts },
    ]);
    let (cohort, truth) = generate_cohort(&m).unwrap();
    (cohort, truth.cluster_labels)
}

#[test]
fn shifted_feature_leads_the_signature() {
    let feature = "spleen_volume_mm3";
    let (cohort, labels) = shifted_cohort(400, feature, 3.0, 2);
    let embedding = line_embedding(&cohort, &labels);
    for cluster in 0..2 {
        let sig = ovr_signature(&cohort, &labels, cluster, &embedding, &config()).unwrap();
        assert_eq!(sig.signature.entries[0].name, feature);
        assert_eq!(sig.signature.len(), 20);
        assert!(sig.ovr_auc > 0.95);
        assert!(sig.resubstitution);
        assert!(!sig.low_confidence);
        let expected = if cluster == 1 { "risk" } else { "protective" };
        assert_eq!(sig.signature.entries[0].direction.as_str(), expected);
    }
}

#[test]
fn identical_records_give_chance_auc() {
    let (mut cohort, _) = generate_cohort(&SynthManifest::new(80, 3)).unwrap();
    let template = cohort.records[0].clone();
    for r in &mut cohort.records {
        r.features = template.features.clone();
        r.confounders = template.confounders;
    }
    let labels: Vec<usize> = (0..80).map(|i| i % 2).collect();
    let embedding = line_embedding(&cohort, &labels);
    let sig = ovr_signature(&cohort, &labels, 0, &embedding, &config()).unwrap();
    assert_eq!(sig.ovr_auc, 0.5);
    assert!(sig.signature.entries.iter().all(|e| e.importance == 0.0));
}

#[test]
fn composition_adds_back_up_to_the_cohort() {
    let (cohort, _) = generate_cohort(&common::planted_manifest(500, 1.0, 6)).unwrap();
    let labels: Vec<usize> = (0..500).map(|i| (i * 7) % 3).collect();
    let comp = cluster_composition(&cohort, &labels).unwrap();
    assert_eq!(comp.iter().map(|c| c.size).sum::<usize>(), 500);
    let cases: f64 = comp.iter().map(|c| c.size as f64 * c.t2d_fraction).sum();
    assert!((cases - cohort.n_cases() as f64).abs() < 1e-9);
    let prevalence = cohort.n_cases() as f64 / 500.0;
    for c in &comp {
        assert!((c.enrichment.unwrap() - c.t2d_fraction / prevalence).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&c.female_fraction));
    }
}

#[test]
fn representatives_are_members_and_signatures_are_reproducible() {
    let (cohort, labels) = shifted_cohort(200, "liver_volume_mm3", 3.0, 8);
    let embedding = line_embedding(&cohort, &labels);
    for cluster in 0..2 {
        let id = cluster_representative(&embedding, &labels, cluster).unwrap();
        let i = cohort.ids().iter().position(|x| *x == id).unwrap();
        assert_eq!(labels[i], cluster);
    }
    let a = ovr_signature(&cohort, &labels, 1, &embedding, &config()).unwrap();
    let b = ovr_signature(&cohort, &labels, 1, &embedding, &config()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn degenerate_labelings_are_rejected() {
    let (cohort, _) = generate_cohort(&SynthManifest::new(60, 9)).unwrap();
    let embedding = line_embedding(&cohort, &[0; 60]);
    assert!(matches!(
        ovr_signature(&cohort, &[0; 60], 0, &embedding, &config()),
        Err(PhenotypeError::SingleCluster)
    ));
    assert!(matches!(
        ovr_signature(&cohort, &[0; 59], 0, &embedding, &config()),
        Err(PhenotypeError::LengthMismatch { .. })
    ));
    let labels: Vec<usize> = (0..60).map(|i| if i % 2 == 0 { 0 } else { 2 }).collect();
    assert!(matches!(
        cluster_representative(&embedding, &labels, 1),
        Err(PhenotypeError::EmptyCluster(1))
    ));
}
