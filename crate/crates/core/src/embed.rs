//! UMAP embedding of attribution profiles, K-means with k-means++ seeding,
//! silhouette scoring and silhouette-guided choice of k.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("need more than n_neighbors = {n_neighbors} distinct rows, got {rows}")]
    TooFewRows { rows: usize, n_neighbors: usize },
    #[error("invalid UMAP config: {0}")]
    InvalidConfig(String),
    #[error("rows have inconsistent dimension")]
    Ragged,
    #[error("cannot form {k} clusters from {n} points")]
    TooFewPoints { n: usize, k: usize },
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("{0} labels for {1} points")]
    LengthMismatch(usize, usize),
    #[error("input contains non-finite values")]
    NonFinite,
}

fn default_neighbors() -> usize {
    15
}
fn default_min_dist() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}
fn default_components() -> usize {
    2
}
fn default_epochs() -> usize {
    500
}
fn default_negative() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapConfig {
    #[serde(default = "default_neighbors")]
    pub n_neighbors: usize,
    #[serde(default = "default_min_dist")]
    pub min_dist: f64,
    #[serde(default = "default_one")]
    pub spread: f64,
    #[serde(default = "default_components")]
    pub n_components: usize,
    #[serde(default = "default_epochs")]
    pub n_epochs: usize,
    #[serde(default = "default_negative")]
    pub negative_sample_rate: usize,
    /// Initial SGD step, decayed linearly to zero.
    #[serde(default = "default_one")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for UmapConfig {
    fn default() -> Self {
        Self {
            n_neighbors: default_neighbors(),
            min_dist: default_min_dist(),
            spread: 1.0,
            n_components: default_components(),
            n_epochs: default_epochs(),
            negative_sample_rate: default_negative(),
            learning_rate: 1.0,
            seed: 0,
        }
    }
}

impl UmapConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.n_neighbors < 2 {
            return Err(EmbedError::InvalidConfig("n_neighbors must be >= 2".into()));
        }
        if self.n_components < 1 {
            return Err(EmbedError::InvalidConfig("n_components must be >= 1".into()));
        }
        if !(self.spread > 0.0 && self.min_dist >= 0.0 && self.min_dist < 3.0 * self.spread) {
            return Err(EmbedError::InvalidConfig("need spread > 0 and 0 <= min_dist < 3 spread".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Initialization {
    Spectral,
    Random,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub ids: Vec<String>,
    pub coords: Vec<Vec<f64>>,
    /// All input rows were identical; every point sits at the origin.
    pub degenerate: bool,
    pub initialization: Initialization,
}

impl Embedding {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Least-squares fit of `1 / (1 + a x^(2b))` to the offset exponential
/// `1 if x < min_dist else exp(-(x - min_dist) / spread)` on 300 points of [0, 3 spread].
pub fn fit_curve(min_dist: f64, spread: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < min_dist { 1.0 } else { (-(x - min_dist) / spread).exp() })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    // Levenberg-Marquardt on (a, b)
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut cost = sse(a, b);
    for _ in 0..500 {
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (&x, &y) in xs.iter().zip(&ys) {
            let x2b = if x > 0.0 { x.powf(2.0 * b) } else { 0.0 };
            let denom = 1.0 + a * x2b;
            let f = 1.0 / denom;
            let r = f - y;
            let da = -x2b / (denom * denom);
            let db = if x > 0.0 {
                -a * x2b * 2.0 * x.ln() / (denom * denom)
            } else {
                0.0
            };
            let g = [da, db];
            for i in 0..2 {
                jtr[i] += g[i] * r;
                for j in 0..2 {
                    jtj[i][j] += g[i] * g[j];
                }
            }
        }
        let m00 = jtj[0][0] * (1.0 + lambda);
        let m11 = jtj[1][1] * (1.0 + lambda);
        let det = m00 * m11 - jtj[0][1] * jtj[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let step_a = -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det;
        let step_b = -(-jtj[1][0] * jtr[0] + m00 * jtr[1]) / det;
        let (na, nb) = (a + step_a, b + step_b);
        let new_cost = if na > 0.0 && nb > 0.0 { sse(na, nb) } else { f64::INFINITY };
        if new_cost < cost {
            let done = (cost - new_cost) < 1e-15 * cost.max(1e-300)
                && step_a.abs() < 1e-12
                && step_b.abs() < 1e-12;
            a = na;
            b = nb;
            cost = new_cost;
            lambda = (lambda * 0.3).max(1e-12);
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (a, b)
}

/// Neighbor lists including self at position 0; sorted by (distance, index).
fn exact_knn(data: &[Vec<f64>], k: usize) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let n = data.len();
    let mut indices = Vec::with_capacity(n);
    let mut distances = Vec::with_capacity(n);
    let mut buf: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        buf.clear();
        for j in 0..n {
            let d = if i == j { 0.0 } else { dist(&data[i], &data[j]) };
            buf.push((d, j));
        }
        let key = |e: &(f64, usize)| (e.0, e.1 != i, e.1);
        let cmp = |x: &(f64, usize), y: &(f64, usize)| {
            let (a, b) = (key(x), key(y));
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if k < n {
            buf.select_nth_unstable_by(k - 1, cmp);
            buf.truncate(k);
        }
        buf.sort_by(cmp);
        indices.push(buf.iter().map(|e| e.1).collect());
        distances.push(buf.iter().map(|e| e.0).collect());
    }
    (indices, distances)
}

const SMOOTH_ITERATIONS: usize = 64;
const SMOOTH_TOLERANCE: f64 = 1e-5;
const MIN_DIST_SCALE: f64 = 1e-3;

/// Per-point (rho, sigma): rho is the nearest positive neighbor distance and
/// sigma solves sum_j exp(-max(0, d_ij - rho) / sigma) = log2(k) by bisection.
fn smooth_knn(distances: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<f64>) {
    let target = (k as f64).log2();
    let global_mean = {
        let total: f64 = distances.iter().flatten().sum();
        total / (distances.len() * k) as f64
    };
    let mut rhos = Vec::with_capacity(distances.len());
    let mut sigmas = Vec::with_capacity(distances.len());
    for row in distances {
        let rho = row.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
        let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
        for _ in 0..SMOOTH_ITERATIONS {
            let psum: f64 = row[1..]
                .iter()
                .map(|&d| {
                    let excess = d - rho;
                    if excess > 0.0 {
                        (-excess / mid).exp()
                    } else {
                        1.0
                    }
                })
                .sum();
            if (psum - target).abs() < SMOOTH_TOLERANCE {
                break;
            }
            if psum > target {
                hi = mid;
                mid = 0.5 * (lo + hi);
            } else {
                lo = mid;
                mid = if hi.is_infinite() { mid * 2.0 } else { 0.5 * (lo + hi) };
            }
        }
        let row_mean = row.iter().sum::<f64>() / row.len() as f64;
        let floor = if rho > 0.0 { row_mean } else { global_mean } * MIN_DIST_SCALE;
        rhos.push(rho);
        sigmas.push(mid.max(floor));
    }
    (rhos, sigmas)
}

/// Symmetrized fuzzy graph as a row-major edge list (both directions).
fn fuzzy_graph(data: &[Vec<f64>], k: usize) -> Vec<(usize, usize, f64)> {
    let (indices, distances) = exact_knn(data, k);
    let (rhos, sigmas) = smooth_knn(&distances, k);
    let mut directed: HashMap<(usize, usize), f64> = HashMap::new();
    for i in 0..data.len() {
        for (&j, &d) in indices[i].iter().zip(&distances[i]) {
            if j == i {
                continue;
            }
            let w = if d - rhos[i] <= 0.0 || sigmas[i] == 0.0 {
                1.0
            } else {
                (-(d - rhos[i]) / sigmas[i]).exp()
            };
            directed.insert((i, j), w);
        }
    }
    let mut sym: HashMap<(usize, usize), f64> = HashMap::new();
    for (&(i, j), &a) in &directed {
        let b = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let w = a + b - a * b;
        sym.insert((i, j), w);
        sym.insert((j, i), w);
    }
    let mut edges: Vec<(usize, usize, f64)> = sym.into_iter().map(|((i, j), w)| (i, j, w)).collect();
    edges.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
    edges
}

const SPECTRAL_MAX_ITER: usize = 3000;
const SPECTRAL_TOL: f64 = 1e-6;

/// Leading non-trivial eigenvectors of the normalized adjacency
/// D^-1/2 W D^-1/2 (equivalently the smallest of the normalized Laplacian),
/// by block subspace iteration with Rayleigh-Ritz. `None` if not converged.
fn spectral_layout(n: usize, edges: &[(usize, usize, f64)], dim: usize, rng: &mut impl Rng) -> Option<Vec<Vec<f64>>> {
    let mut degree = vec![0.0; n];
    for &(i, _, w) in edges {
        degree[i] += w;
    }
    if degree.iter().any(|&d| d <= 0.0) {
        return None;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let block = (dim + 1 + 4).min(n);
    if block < dim + 1 {
        return None;
    }
    // (I + M) / 2 keeps the spectrum in [0, 1]
    let apply = |q: &DMatrix<f64>| -> DMatrix<f64> {
        let mut out = q * 0.5;
        for &(i, j, w) in edges {
            let m = 0.5 * w * inv_sqrt[i] * inv_sqrt[j];
            for c in 0..q.ncols() {
                out[(i, c)] += m * q[(j, c)];
            }
        }
        out
    };
    let mut q = DMatrix::from_fn(n, block, |_, _| StandardNormal.sample(rng));
    q = q.qr().q();
    for iter in 1..=SPECTRAL_MAX_ITER {
        let z = apply(&q);
        if iter % 10 == 0 {
            let h = q.transpose() * &z;
            let h = (&h + h.transpose()) * 0.5;
            let eig = SymmetricEigen::new(h);
            let mut order: Vec<usize> = (0..block).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let u = DMatrix::from_fn(block, block, |r, c| eig.eigenvectors[(r, order[c])]);
            let ritz = &q * &u;
            let az = &z * &u;
            let converged = (0..=dim).all(|c| {
                let theta = eig.eigenvalues[order[c]];
                (az.column(c) - ritz.column(c) * theta).norm() < SPECTRAL_TOL
            });
            if converged {
                return Some(
                    (0..n)
                        .map(|r| (1..=dim).map(|c| ritz[(r, c)]).collect())
                        .collect(),
                );
            }
            q = ritz;
            let z = apply(&q);
            q = z.qr().q();
        } else {
            q = z.qr().q();
        }
    }
    None
}

/// UMAP embedding with exact neighbors and serially ordered SGD.
///
/// Identical rows are collapsed before the neighbor graph is built, so
/// duplicates come back with identical coordinates.
pub fn umap_embed(ids: &[String], data: &[Vec<f64>], config: &UmapConfig) -> Result<Embedding, EmbedError> {
    config.validate()?;
    let n = data.len();
    if ids.len() != n {
        return Err(EmbedError::LengthMismatch(ids.len(), n));
    }
    if n <= config.n_neighbors {
        return Err(EmbedError::TooFewRows {
            rows: n,
            n_neighbors: config.n_neighbors,
        });
    }
    let width = data[0].len();
    if data.iter().any(|r| r.len() != width) {
        return Err(EmbedError::Ragged);
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    let dim = config.n_components;
    if data.iter().all(|r| r == &data[0]) {
        return Ok(Embedding {
            ids: ids.to_vec(),
            coords: vec![vec![0.0; dim]; n],
            degenerate: true,
            initialization: Initialization::Degenerate,
        });
    }

    // identical rows are embedded once and share the resulting location
    let mut first_of: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique: Vec<Vec<f64>> = Vec::new();
    let owner: Vec<usize> = data
        .iter()
        .map(|row| {
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            *first_of.entry(key).or_insert_with(|| {
                unique.push(row.clone());
                unique.len() - 1
            })
        })
        .collect();
    if unique.len() <= config.n_neighbors {
        return Err(EmbedError::TooFewRows {
            rows: unique.len(),
            n_neighbors: config.n_neighbors,
        });
    }
    let data = &unique;
    let n = data.len();

    let mut rng = seed::rng_from(config.seed);
    let edges = fuzzy_graph(data, config.n_neighbors);

    let (mut coords, initialization) = match spectral_layout(n, &edges, dim, &mut rng) {
        Some(raw) => {
            let max_abs = raw.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            let expansion = if max_abs > 0.0 { 10.0 / max_abs } else { 1.0 };
            let noise = Normal::new(0.0, 1e-4).expect("valid normal");
            let jittered: Vec<Vec<f64>> = raw
                .iter()
                .map(|r| r.iter().map(|v| v * expansion + noise.sample(&mut rng)).collect())
                .collect();
            (jittered, Initialization::Spectral)
        }
        None => (
            (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect(),
            Initialization::Random,
        ),
    };
    // rescale each axis to [0, 10]
    for c in 0..dim {
        let (lo, hi) = coords
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[c]), hi.max(r[c])));
        let span = hi - lo;
        for r in coords.iter_mut() {
            r[c] = if span > 0.0 { 10.0 * (r[c] - lo) / span } else { 0.0 };
        }
    }

    let (a, b) = fit_curve(config.min_dist, config.spread);
    optimize_layout(&mut coords, &edges, a, b, config, &mut rng);

    Ok(Embedding {
        ids: ids.to_vec(),
        coords: owner.iter().map(|&u| coords[u].clone()).collect(),
        degenerate: false,
        initialization,
    })
}

fn clip(v: f64) -> f64 {
    v.clamp(-4.0, 4.0)
}

fn optimize_layout(
    coords: &mut [Vec<f64>],
    edges: &[(usize, usize, f64)],
    a: f64,
    b: f64,
    config: &UmapConfig,
    rng: &mut impl Rng,
) {
    let n = coords.len();
    let n_epochs = config.n_epochs;
    let max_w = edges.iter().fold(0.0f64, |m, e| m.max(e.2));
    let kept: Vec<(usize, usize, f64)> = edges
        .iter()
        .copied()
        .filter(|e| e.2 >= max_w / n_epochs as f64)
        .collect();
    let epochs_per_sample: Vec<f64> = kept.iter().map(|e| max_w / e.2).collect();
    let neg_rate = config.negative_sample_rate as f64;
    let epochs_per_negative: Vec<f64> = epochs_per_sample.iter().map(|e| e / neg_rate).collect();
    let mut next_sample = epochs_per_sample.clone();
    let mut next_negative = epochs_per_negative.clone();
    let dim = config.n_components;
    let mut alpha = config.learning_rate;
    let mut grad = vec![0.0; dim];

    for epoch in 0..n_epochs {
        let e = epoch as f64;
        for (idx, &(head, tail, _)) in kept.iter().enumerate() {
            if next_sample[idx] > e {
                continue;
            }
            let d2 = sq_dist(&coords[head], &coords[tail]);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (a * d2.powf(b) + 1.0)
            } else {
                0.0
            };
            for d in 0..dim {
                grad[d] = clip(coeff * (coords[head][d] - coords[tail][d]));
            }
            for d in 0..dim {
                coords[head][d] += grad[d] * alpha;
                coords[tail][d] -= grad[d] * alpha;
            }
            next_sample[idx] += epochs_per_sample[idx];

            let n_neg = ((e - next_negative[idx]) / epochs_per_negative[idx]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let other = rng.gen_range(0..n);
                if other == head {
                    continue;
                }
                let d2 = sq_dist(&coords[head], &coords[other]);
                if d2 <= 0.0 {
                    continue;
                }
                let coeff = 2.0 * b / ((0.001 + d2) * (a * d2.powf(b) + 1.0));
                for d in 0..dim {
                    grad[d] = clip(coeff * (coords[head][d] - coords[other][d]));
                }
                for d in 0..dim {
                    coords[head][d] += grad[d] * alpha;
                }
            }
            next_negative[idx] += n_neg as f64 * epochs_per_negative[idx];
        }
        alpha = config.learning_rate * (1.0 - (epoch + 1) as f64 / n_epochs as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub silhouette: Option<f64>,
}

const KMEANS_MAX_ITER: usize = 300;
const KMEANS_TOL: f64 = 1e-8;

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].clone()).collect()
}

/// Lloyd's K-means from k-means++ seeds. Stops when no centroid moves more
/// than 1e-8 or after 300 iterations. An emptied cluster takes over the point
/// farthest from its own centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel, EmbedError> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(EmbedError::TooFewPoints { n, k });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(EmbedError::Ragged);
    }
    let mut rng = seed::rng_from(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            labels[i] = c;
            dists[i] = d;
            inertia += d;
        }
        history.push(inertia);

        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&x, &y| dists[x].total_cmp(&dists[y]).then(y.cmp(&x)));
            if let Some(i) = donor {
                let old = labels[i];
                counts[old] -= 1;
                sums[old].iter_mut().zip(&points[i]).for_each(|(s, v)| *s -= v);
                labels[i] = c;
                counts[c] = 1;
                sums[c] = points[i].clone();
                dists[i] = 0.0;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    Ok(ClusterModel {
        k,
        labels,
        centroids,
        inertia,
        inertia_history: history,
        iterations,
        silhouette: None,
    })
}

/// Mean silhouette with Euclidean distances. Singleton clusters score 0.
pub fn silhouette_mean(points: &[Vec<f64>], labels: &[usize]) -> Result<f64, EmbedError> {
    if points.len() != labels.len() {
        return Err(EmbedError::LengthMismatch(labels.len(), points.len()));
    }
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_clusters];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(EmbedError::SingleCluster);
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; n_clusters];
    for i in 0..points.len() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..points.len() {
            if i != j {
                sums[labels[j]] += dist(&points[i], &points[j]);
            }
        }
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..n_clusters)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub model: ClusterModel,
    /// (k, mean silhouette) for every k tried.
    pub scores: Vec<(usize, f64)>,
    pub warning: Option<String>,
}

/// Runs K-means for each k in the range and keeps the highest mean
/// silhouette, preferring the smaller k on ties.
pub fn select_k(points: &[Vec<f64>], k_min: usize, k_max: usize, seed: u64) -> Result<KSelection, EmbedError> {
    let n = points.len();
    let k_min = k_min.max(2);
    if n < k_min {
        return Err(EmbedError::TooFewPoints { n, k: k_min });
    }
    let mut warning = None;
    let mut k_max = k_max;
    if n < k_max {
        warning = Some(format!("only {n} points; k range restricted to {k_min}..={n}"));
        k_max = n;
    }
    let mut best: Option<ClusterModel> = None;
    let mut scores = Vec::new();
    for k in k_min..=k_max {
        let mut model = kmeans(points, k, seed::derive_indexed(seed, "kmeans", k as u64))?;
        let s = silhouette_mean(points, &model.labels)?;
        model.silhouette = Some(s);
        scores.push((k, s));
        if best.as_ref().is_none_or(|b| s > b.silhouette.unwrap_or(f64::NEG_INFINITY)) {
            best = Some(model);
        }
    }
    Ok(KSelection {
        model: best.expect("non-empty k range"),
        scores,
        warning,
    })
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        return 1.0;
    }
    (index - expected) / (max_index - expected)
}
