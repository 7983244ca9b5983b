use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::matrix::{distance, squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 3, n_init: 10, max_iter: 300, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    pub config: KMeansConfig,
}

impl KMeansModel {
    pub fn predict(&self, x: &[f64]) -> usize {
        nearest(&self.centroids, x).0
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.rows()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Index and squared distance of the nearest centroid; ties go to the lower index.
fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = squared_distance(row, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Outcome of one Lloyd run, with the inertia after every assignment step.
#[derive(Debug, Clone)]
pub struct LloydRun {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    pub inertia_trace: Vec<f64>,
}

pub fn kmeans_plus_plus(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data.iter_rows().map(|r| squared_distance(r, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (d, r) in d2.iter_mut().zip(data.iter_rows()) {
            *d = d.min(squared_distance(r, data.row(next)));
        }
    }
    data.select_rows(&chosen)
}

fn assign(data: &Matrix, centroids: &Matrix, labels: &mut [usize]) -> (bool, f64) {
    let mut changed = false;
    let mut inertia = 0.0;
    for (label, row) in labels.iter_mut().zip(data.iter_rows()) {
        let (c, d) = nearest(centroids, row);
        changed |= *label != c;
        *label = c;
        inertia += d;
    }
    (changed, inertia)
}

/// Moves the point farthest from its centroid in the largest cluster into
/// every empty cluster.
fn repair_empty(data: &Matrix, centroids: &mut Matrix, labels: &mut [usize]) {
    let k = centroids.rows();
    loop {
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).expect("k > 0");
        if sizes[largest] < 2 {
            return;
        }
        let far = (0..labels.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                let da = squared_distance(data.row(a), centroids.row(largest));
                let db = squared_distance(data.row(b), centroids.row(largest));
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("largest cluster is non-empty");
        labels[far] = empty;
        centroids.row_mut(empty).copy_from_slice(data.row(far));
    }
}

fn update_centroids(data: &Matrix, labels: &[usize], centroids: &mut Matrix) {
    let k = centroids.rows();
    let mut sums = Matrix::zeros(k, data.cols());
    let mut counts = vec![0usize; k];
    for (row, &l) in data.iter_rows().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / counts[c] as f64;
            }
        }
    }
}

pub fn lloyd(data: &Matrix, initial: Matrix, max_iter: usize) -> LloydRun {
    let mut centroids = initial;
    let mut labels = vec![usize::MAX; data.rows()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let (_, mut inertia) = assign(data, &centroids, &mut labels);
    repair_empty(data, &mut centroids, &mut labels);
    trace.push(inertia);
    while iterations < max_iter {
        iterations += 1;
        update_centroids(data, &labels, &mut centroids);
        let (changed, new_inertia) = assign(data, &centroids, &mut labels);
        repair_empty(data, &mut centroids, &mut labels);
        inertia = new_inertia;
        trace.push(inertia);
        if !changed {
            break;
        }
    }
    // Inertia of the final labels against the final centroids.
    inertia = data.iter_rows().zip(&labels).map(|(r, &l)| squared_distance(r, centroids.row(l))).sum();
    LloydRun { centroids, labels, inertia, iterations, inertia_trace: trace }
}

fn validate(data: &Matrix, k: usize) -> Result<(), ClusterError> {
    if k == 0 || data.rows() < k {
        return Err(ClusterError::TooFewRows { n: data.rows(), need: k.max(1) });
    }
    Ok(())
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn best_of(runs: impl Iterator<Item = LloydRun>) -> LloydRun {
    runs.reduce(|best, r| if r.inertia < best.inertia { r } else { best }).expect("at least one run")
}

pub fn kmeans_fit(data: &Matrix, config: &KMeansConfig) -> Result<KMeansModel, ClusterError> {
    validate(data, config.k)?;
    let runs: Vec<LloydRun> = (0..config.n_init.max(1) as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = init_rng(config.seed, i);
            lloyd(data, kmeans_plus_plus(data, config.k, &mut rng), config.max_iter)
        })
        .collect();
    Ok(into_model(best_of(runs.into_iter()), config))
}

fn into_model(run: LloydRun, config: &KMeansConfig) -> KMeansModel {
    KMeansModel {
        centroids: run.centroids,
        labels: run.labels,
        inertia: run.inertia,
        iterations: run.iterations,
        config: config.clone(),
    }
}

/// Best inertia for each `k` in `ks` (ascending). Each fit also considers a
/// warm start from the previous `k`'s centroids plus its farthest point, so
/// the curve never rises.
pub fn elbow_curve(data: &Matrix, ks: &[usize], base: &KMeansConfig) -> Result<Vec<(usize, f64)>, ClusterError> {
    let mut out = Vec::with_capacity(ks.len());
    let mut prev: Option<KMeansModel> = None;
    for &k in ks {
        let config = KMeansConfig { k, ..base.clone() };
        let mut model = kmeans_fit(data, &config)?;
        if let Some(p) = prev.as_ref().filter(|p| p.centroids.rows() < k) {
            let mut rows: Vec<Vec<f64>> = p.centroids.iter_rows().map(<[f64]>::to_vec).collect();
            let mut taken: Vec<usize> = Vec::new();
            while rows.len() < k {
                let seeds = Matrix::from_rows(&rows);
                let far = (0..data.rows())
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| {
                        nearest(&seeds, data.row(a)).1.total_cmp(&nearest(&seeds, data.row(b)).1).then(b.cmp(&a))
                    })
                    .expect("n >= k");
                taken.push(far);
                rows.push(data.row(far).to_vec());
            }
            let warm = lloyd(data, Matrix::from_rows(&rows), config.max_iter);
            if warm.inertia < model.inertia {
                model = into_model(warm, &config);
            }
        }
        out.push((k, model.inertia));
        prev = Some(model);
    }
    Ok(out)
}

/// Mean silhouette; above `max_points` rows a seeded uniform subsample is used.
pub fn silhouette(data: &Matrix, labels: &[usize], max_points: usize, seed: u64) -> Result<f64, ClusterError> {
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let idx: Vec<usize> = if data.rows() > max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = index::sample(&mut rng, data.rows(), max_points).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..data.rows()).collect()
    };
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let scores: Vec<f64> = idx
        .par_iter()
        .map(|&i| {
            let mut sums = vec![0.0; n_labels];
            let mut counts = vec![0usize; n_labels];
            for &j in &idx {
                if j != i {
                    sums[labels[j]] += distance(data.row(i), data.row(j));
                    counts[labels[j]] += 1;
                }
            }
            let own = labels[i];
            if counts[own] == 0 {
                return 0.0;
            }
            let a = sums[own] / counts[own] as f64;
            let b = (0..n_labels)
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if !b.is_finite() {
                return 0.0;
            }
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
