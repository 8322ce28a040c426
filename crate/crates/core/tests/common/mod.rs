//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use phenoscope::forest::{Node, Tree};
use phenoscope::synth::{EffectDirection, PlantedEffect, Subpopulation, SynthManifest};
use rand::Rng;

/// Random tree of depth <= `max_depth` whose splits use features drawn from
/// `features`. Leaf covers are random positive masses; internal covers are sums.
pub fn random_tree(rng: &mut impl Rng, max_depth: usize, features: &[usize]) -> Tree {
    fn grow(rng: &mut impl Rng, nodes: &mut Vec<Node>, depth: usize, max_depth: usize, features: &[usize]) -> usize {
        let id = nodes.len();
        if depth == max_depth || (depth > 0 && rng.gen_bool(0.25)) {
            nodes.push(Node::Leaf {
                value: rng.gen(),
                cover: rng.gen_range(0.5..20.0),
                count: 5,
            });
            return id;
        }
        nodes.push(Node::Leaf {
            value: 0.0,
            cover: 0.0,
            count: 0,
        });
        let feature = features[rng.gen_range(0..features.len())];
        let threshold = rng.gen_range(-1.0..1.0);
        let left = grow(rng, nodes, depth + 1, max_depth, features);
        let right = grow(rng, nodes, depth + 1, max_depth, features);
        let cover = nodes[left].cover() + nodes[right].cover();
        nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        };
        id
    }
    let mut nodes = Vec::new();
    grow(rng, &mut nodes, 0, max_depth, features);
    Tree { nodes }
}

/// E[f(x) | x_S] under cover-weighted path conditioning.
pub fn conditional_expectation(tree: &Tree, x: &[f64], known: &[bool], node: usize) -> f64 {
    match tree.nodes[node] {
        Node::Leaf { value, .. } => value,
        Node::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            if known[feature] {
                let next = if x[feature] <= threshold { left } else { right };
                conditional_expectation(tree, x, known, next)
            } else {
                (tree.nodes[left].cover() * conditional_expectation(tree, x, known, left)
                    + tree.nodes[right].cover() * conditional_expectation(tree, x, known, right))
                    / cover
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Shapley values by enumerating every coalition of the features the tree uses.
/// Returns (attributions over `n_inputs`, base value).
pub fn brute_force_shapley(tree: &Tree, x: &[f64], n_inputs: usize) -> (Vec<f64>, f64) {
    let mut used: Vec<usize> = tree
        .nodes
        .iter()
        .filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
        .collect();
    used.sort_unstable();
    used.dedup();
    let m = used.len();
    let mut phi = vec![0.0; n_inputs];
    let value = |mask: usize| {
        let mut known = vec![false; n_inputs];
        for (b, &f) in used.iter().enumerate() {
            if mask & (1 << b) != 0 {
                known[f] = true;
            }
        }
        conditional_expectation(tree, x, &known, 0)
    };
    for (b, &f) in used.iter().enumerate() {
        for mask in 0..(1usize << m) {
            if mask & (1 << b) != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = factorial(s) * factorial(m - s - 1) / factorial(m);
            phi[f] += w * (value(mask | (1 << b)) - value(mask));
        }
    }
    (phi, value(0))
}

/// The five-effect planted manifest used across end-to-end checks.
pub const PLANTED: [(&str, EffectDirection); 5] = [
    ("pancreas_volume_mm3", EffectDirection::Risk),
    ("liver_intensity_median", EffectDirection::Protective),
    ("visceral_fat_volume_mm3", EffectDirection::Risk),
    ("skeletal_muscle_intensity_median", EffectDirection::Protective),
    ("kidney_left_shape_Sphericity", EffectDirection::Risk),
];

pub fn planted_manifest(n: usize, strength: f64, seed: u64) -> SynthManifest {
    let mut m = SynthManifest::new(n, seed);
    m.effects = PLANTED
        .iter()
        .map(|&(feature, direction)| PlantedEffect {
            feature: feature.into(),
            direction,
            strength,
        })
        .collect();
    m
}

pub const PHENOTYPE_FEATURE: &str = "pancreas_volume_mm3";

/// Two equal subpopulations 4 SD apart on one feature (noise SD 0.5), with a
/// risk effect on that feature and balanced prevalence, so attribution
/// profiles split cleanly between the groups.
pub fn phenotype_manifest(n: usize, seed: u64) -> SynthManifest {
    let mut m = SynthManifest::new(n, seed);
    m.noise_sd = 0.5;
    m.prevalence = 0.5;
    m.effects = vec![PlantedEffect {
        feature: PHENOTYPE_FEATURE.into(),
        direction: EffectDirection::Risk,
        strength: 3.0,
    }];
    let mut shifted = BTreeMap::new();
    shifted.insert(PHENOTYPE_FEATURE.to_string(), 4.0);
    m.cluster_spec = Some(vec![
        Subpopulation {
            weight: 0.5,
            shifts: BTreeMap::new(),
        },
        Subpopulation {
            weight: 0.5,
            shifts: shifted,
        },
    ]);
    m
}
