//! Isolation Forest: random axis-parallel partitioning, scored by average
//! isolation depth normalised by `c(psi)`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::quantile;

const EULER_GAMMA: f64 = 0.5772156649;

#[derive(Debug, Error, PartialEq)]
pub enum IforestError {
    #[error("isolation forest needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("contamination {0} outside (0, 0.5)")]
    Contamination(f64),
    #[error("n_trees and subsample size must be positive")]
    ZeroSize,
    #[error("non-finite input value")]
    NonFinite,
    #[error("row has {got} columns, model expects {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split { feature: usize, value: f64, left: u32, right: u32 },
    Leaf { size: usize, depth: usize },
}

/// Flat node array; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<Node>,
}

impl IsolationTree {
    fn build(data: &Matrix, rows: Vec<usize>, depth_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.grow(data, rows, 0, depth_limit, rng);
        tree
    }

    fn grow(&mut self, data: &Matrix, rows: Vec<usize>, depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { size: rows.len(), depth });
        if depth >= limit || rows.len() <= 1 {
            return id;
        }
        let ranges: Vec<(usize, f64, f64)> = (0..data.cols())
            .filter_map(|j| {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &i| {
                    let v = data.get(i, j);
                    (l.min(v), h.max(v))
                });
                (hi > lo).then_some((j, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return id;
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let value = loop {
            let v = rng.random_range(lo..hi);
            if v > lo {
                break v;
            }
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| data.get(i, feature) < value);
        let left = self.grow(data, left_rows, depth + 1, limit, rng);
        let right = self.grow(data, right_rows, depth + 1, limit, rng);
        self.nodes[id as usize] = Node::Split { feature, value, left, right };
        id
    }

    /// Depth of the reached leaf plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split { feature, value, left, right } => {
                    at = if x[*feature] < *value { *left } else { *right } as usize;
                }
                Node::Leaf { size, depth } => return *depth as f64 + average_path_length(*size),
            }
        }
    }

    pub fn max_depth(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { depth, .. } => Some(*depth),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

fn harmonic(i: f64) -> f64 {
    i.ln() + EULER_GAMMA
}

/// `c(n) = 2 H(n-1) - 2 (n-1) / n`, with `c(n) = 0` for `n <= 1`.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n = n as f64;
    2.0 * harmonic(n - 1.0) - 2.0 * (n - 1.0) / n
}

pub fn depth_limit(subsample: usize) -> usize {
    (subsample.max(1) as f64).log2().ceil() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IforestConfig {
    pub n_trees: usize,
    pub contamination: f64,
    pub subsample: usize,
    pub seed: u64,
}

impl Default for IforestConfig {
    fn default() -> Self {
        Self { n_trees: 100, contamination: 0.01, subsample: 256, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestModel {
    pub trees: Vec<IsolationTree>,
    /// Effective subsample size `min(psi, n)`.
    pub subsample: usize,
    pub contamination: f64,
    pub score_threshold: f64,
    pub seed: u64,
    pub n_features: usize,
}

impl IsolationForestModel {
    pub fn fit(data: &Matrix, config: &IforestConfig) -> Result<Self, IforestError> {
        let n = data.rows();
        if n < 2 {
            return Err(IforestError::TooFewRows(n));
        }
        if !(config.contamination > 0.0 && config.contamination < 0.5) {
            return Err(IforestError::Contamination(config.contamination));
        }
        if config.n_trees == 0 || config.subsample == 0 {
            return Err(IforestError::ZeroSize);
        }
        if data.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(IforestError::NonFinite);
        }
        let psi = config.subsample.min(n);
        let limit = depth_limit(psi);
        let trees: Vec<IsolationTree> = (0..config.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(t as u64);
                let mut rows = index::sample(&mut rng, n, psi).into_vec();
                rows.sort_unstable();
                IsolationTree::build(data, rows, limit, &mut rng)
            })
            .collect();
        let mut model = Self {
            trees,
            subsample: psi,
            contamination: config.contamination,
            score_threshold: 0.0,
            seed: config.seed,
            n_features: data.cols(),
        };
        let scores = model.score_matrix(data)?;
        model.score_threshold =
            quantile::quantile(&scores, 1.0 - config.contamination).expect("n >= 2 training scores");
        Ok(model)
    }

    pub fn expected_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// Anomaly score `2^(-E[h(x)] / c(psi))`.
    pub fn score(&self, x: &[f64]) -> Result<f64, IforestError> {
        if x.len() != self.n_features {
            return Err(IforestError::Dimension { expected: self.n_features, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(IforestError::NonFinite);
        }
        Ok(score_from_path_length(self.expected_path_length(x), self.subsample))
    }

    pub fn score_matrix(&self, data: &Matrix) -> Result<Vec<f64>, IforestError> {
        data.iter_rows().map(|r| self.score(r)).collect()
    }

    /// `score > threshold` for each score.
    pub fn flag(&self, scores: &[f64]) -> Vec<bool> {
        scores.iter().map(|&s| s > self.score_threshold).collect()
    }

    /// Flags on the training rows themselves: exactly the top
    /// `contamination` share, ties going to the lower row index.
    pub fn flag_training(&self, scores: &[f64]) -> Vec<bool> {
        quantile::top_fraction(scores, self.contamination)
    }
}

pub fn score_from_path_length(expected: f64, subsample: usize) -> f64 {
    let c = average_path_length(subsample);
    if c == 0.0 {
        return 0.5;
    }
    2f64.powf(-expected / c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    fn blob(n: usize, dims: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Matrix::from_vec(n, dims, (0..n * dims).map(|_| normal.sample(&mut rng)).collect())
    }

    #[test]
    fn c_of_two() {
        assert_abs_diff_eq!(average_path_length(2), 0.1544313, epsilon = 1e-7);
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(0), 0.0);
    }

    #[test]
    fn score_formula_limits() {
        let c = average_path_length(256);
        assert_abs_diff_eq!(score_from_path_length(c, 256), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(score_from_path_length(1e-12, 256), 1.0, epsilon = 1e-9);
        assert!(score_from_path_length(3.0, 256) > score_from_path_length(6.0, 256));
    }

    #[test]
    fn flags_exactly_contamination_share() {
        let data = blob(1000, 4, 1);
        let model = IsolationForestModel::fit(&data, &IforestConfig::default()).unwrap();
        let scores = model.score_matrix(&data).unwrap();
        assert_eq!(model.flag_training(&scores).iter().filter(|f| **f).count(), 10);
        assert_eq!(model.flag(&scores).iter().filter(|f| **f).count(), 10);
        assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn identical_rows_still_flag_ten() {
        let data = Matrix::from_vec(1000, 4, vec![0.3; 4000]);
        let model = IsolationForestModel::fit(&data, &IforestConfig::default()).unwrap();
        let scores = model.score_matrix(&data).unwrap();
        assert!(scores.iter().all(|&s| s == scores[0]));
        let flags = model.flag_training(&scores);
        assert_eq!(flags.iter().filter(|f| **f).count(), 10);
        assert!(flags[..10].iter().all(|f| *f));
        assert!(model.flag(&scores).iter().all(|f| !*f));
    }

    #[test]
    fn depth_is_capped() {
        let data = blob(3000, 4, 2);
        let model = IsolationForestModel::fit(&data, &IforestConfig::default()).unwrap();
        assert!(model.trees.iter().all(|t| t.max_depth() <= 8));
        for t in &model.trees {
            let leaf_total: usize = t
                .nodes
                .iter()
                .map(|n| match n {
                    Node::Leaf { size, .. } => *size,
                    _ => 0,
                })
                .sum();
            assert_eq!(leaf_total, 256);
        }
    }

    #[test]
    fn contamination_sweep_tracks_rate() {
        let data = blob(2000, 4, 3);
        for c in [0.005, 0.01, 0.02] {
            let cfg = IforestConfig { contamination: c, ..Default::default() };
            let model = IsolationForestModel::fit(&data, &cfg).unwrap();
            let scores = model.score_matrix(&data).unwrap();
            let frac = model.flag(&scores).iter().filter(|f| **f).count() as f64 / 2000.0;
            assert!((frac - c).abs() <= 1.0 / 2000.0 + 1e-12, "c={c} frac={frac}");
        }
    }

    #[test]
    fn errors() {
        let one = Matrix::from_vec(1, 2, vec![0.0, 0.0]);
        assert_eq!(IsolationForestModel::fit(&one, &IforestConfig::default()), Err(IforestError::TooFewRows(1)));
        let data = blob(10, 2, 0);
        for c in [0.0, 0.5, -1.0] {
            let cfg = IforestConfig { contamination: c, ..Default::default() };
            assert_eq!(IsolationForestModel::fit(&data, &cfg), Err(IforestError::Contamination(c)));
        }
        let model = IsolationForestModel::fit(&data, &IforestConfig::default()).unwrap();
        assert_eq!(model.score(&[f64::NAN, 0.0]), Err(IforestError::NonFinite));
    }

    #[test]
    fn deterministic_under_seed() {
        let data = blob(500, 4, 4);
        let a = IsolationForestModel::fit(&data, &IforestConfig::default()).unwrap();
        let b = IsolationForestModel::fit(&data, &IforestConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = IsolationForestModel::fit(&data, &IforestConfig { seed: 7, ..Default::default() }).unwrap();
        assert_ne!(a.trees, c.trees);
    }

    #[test]
    fn duplicating_rows_keeps_scores() {
        let data = blob(2000, 4, 5);
        let mut doubled_rows: Vec<Vec<f64>> = data.iter_rows().map(<[f64]>::to_vec).collect();
        doubled_rows.extend(data.iter_rows().map(<[f64]>::to_vec));
        let doubled = Matrix::from_rows(&doubled_rows);
        let mut base = vec![0.0; 2000];
        let mut dup = vec![0.0; 2000];
        // 1000 trees per forest: at 100 the seed-to-seed spread alone exceeds 0.02.
        for seed in 0..5 {
            let cfg = IforestConfig { seed, n_trees: 1000, ..Default::default() };
            let a = IsolationForestModel::fit(&data, &cfg).unwrap().score_matrix(&data).unwrap();
            let b = IsolationForestModel::fit(&doubled, &cfg).unwrap().score_matrix(&data).unwrap();
            for i in 0..2000 {
                base[i] += a[i] / 5.0;
                dup[i] += b[i] / 5.0;
            }
        }
        let worst = base.iter().zip(&dup).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.02, "max score shift {worst}");
    }

    /// Exact expected path length of point `t` in sorted 1-D data under the
    /// same partitioning law: split uniform over [min, max), depth cap, and
    /// `c(size)` at leaves. Enumerates every gap the split can land in.
    fn exact_path_length(xs: &[f64], t: usize, limit: usize) -> f64 {
        use std::collections::HashMap;
        fn rec(
            xs: &[f64],
            (l, r, depth): (usize, usize, usize),
            t: usize,
            limit: usize,
            memo: &mut HashMap<(usize, usize, usize), f64>,
        ) -> f64 {
            if let Some(&v) = memo.get(&(l, r, depth)) {
                return v;
            }
            let size = r - l + 1;
            let e = if depth >= limit || size <= 1 || xs[r] == xs[l] {
                depth as f64 + average_path_length(size)
            } else {
                let span = xs[r] - xs[l];
                let mut e = 0.0;
                for k in l..r {
                    let p = (xs[k + 1] - xs[k]) / span;
                    if p == 0.0 {
                        continue;
                    }
                    let side = if t <= k { (l, k, depth + 1) } else { (k + 1, r, depth + 1) };
                    e += p * rec(xs, side, t, limit, memo);
                }
                e
            };
            memo.insert((l, r, depth), e);
            e
        }
        rec(xs, (0, xs.len() - 1, 0), t, limit, &mut HashMap::new())
    }

    #[test]
    fn outlier_matches_exhaustive_expected_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut xs: Vec<f64> = (0..50).map(|_| normal.sample(&mut rng)).collect();
        xs.push(25.0);
        xs.sort_by(f64::total_cmp);
        let data = Matrix::from_vec(51, 1, xs.clone());
        let cfg = IforestConfig { n_trees: 4000, ..Default::default() };
        let model = IsolationForestModel::fit(&data, &cfg).unwrap();
        let limit = depth_limit(51);

        let exact: Vec<f64> = (0..51).map(|t| exact_path_length(&xs, t, limit)).collect();
        let exact_argmin = (0..51).min_by(|&a, &b| exact[a].total_cmp(&exact[b])).unwrap();
        assert_eq!(exact_argmin, 50);

        let scores = model.score_matrix(&data).unwrap();
        let best = (0..51).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert_eq!(best, 50);
        for t in [0, 10, 25, 40, 50] {
            let est = model.expected_path_length(&[xs[t]]);
            assert!((est - exact[t]).abs() < 0.05 * exact[t].max(1.0), "t={t} est={est} exact={}", exact[t]);
        }
    }
}
