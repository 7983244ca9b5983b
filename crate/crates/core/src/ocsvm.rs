//! ν-One-Class SVM with an RBF kernel, trained by SMO on the dual
//!
//! ```text
//! min  ½ Σᵢ Σⱼ αᵢ αⱼ K(xᵢ, xⱼ)   s.t.  Σ αᵢ = 1,  0 ≤ αᵢ ≤ 1/(ν n)
//! ```
//!
//! Each step moves mass between the maximal KKT-violating pair and solves
//! the two-variable subproblem exactly, so the objective never increases.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{squared_distance, Matrix};

const ALPHA_PRUNE: f64 = 1e-12;
const TAU: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum OcsvmError {
    #[error("one-class SVM needs at least one training row")]
    Empty,
    #[error("nu {0} outside (0, 1]")]
    Nu(f64),
    #[error("gamma {0} must be positive")]
    Gamma(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("SMO did not converge after {iterations} iterations (KKT gap {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcsvmConfig {
    pub nu: f64,
    pub gamma: f64,
    pub tol: f64,
    /// Upper bound on SMO pair updates.
    pub max_passes: usize,
    /// Training rows beyond this are uniformly subsampled; `None` disables.
    pub subsample_cap: Option<usize>,
    pub cache_rows: usize,
    pub seed: u64,
}

impl Default for OcsvmConfig {
    fn default() -> Self {
        Self {
            nu: 0.01,
            gamma: 0.1,
            tol: 1e-3,
            max_passes: 2_000_000,
            subsample_cap: Some(10_000),
            cache_rows: 512,
            seed: 42,
        }
    }
}

pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64, OcsvmError> {
    if x.len() != y.len() {
        return Err(OcsvmError::Dimension(x.len(), y.len()));
    }
    Ok((-gamma * squared_distance(x, y)).exp())
}

/// Fixed-capacity least-recently-used store of kernel rows.
struct KernelCache<'a> {
    data: &'a Matrix,
    gamma: f64,
    capacity: usize,
    clock: u64,
    rows: HashMap<usize, (Vec<f64>, u64)>,
}

impl<'a> KernelCache<'a> {
    fn new(data: &'a Matrix, gamma: f64, capacity: usize) -> Self {
        Self { data, gamma, capacity: capacity.max(2), clock: 0, rows: HashMap::new() }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        self.clock += 1;
        let clock = self.clock;
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.capacity {
                let oldest = *self.rows.iter().min_by_key(|(_, (_, t))| *t).map(|(k, _)| k).expect("non-empty");
                self.rows.remove(&oldest);
            }
            let xi = self.data.row(i);
            let row = self.data.iter_rows().map(|xt| (-self.gamma * squared_distance(xi, xt)).exp()).collect();
            self.rows.insert(i, (row, clock));
        }
        let entry = self.rows.get_mut(&i).expect("just inserted");
        entry.1 = clock;
        &entry.0
    }
}

/// Step-wise SMO state, exposed so callers can observe every pair update.
pub struct SmoSolver<'a> {
    cache: KernelCache<'a>,
    alpha: Vec<f64>,
    grad: Vec<f64>,
    upper: f64,
    tol: f64,
    iterations: usize,
}

impl<'a> SmoSolver<'a> {
    pub fn new(data: &'a Matrix, nu: f64, gamma: f64, tol: f64, cache_rows: usize) -> Self {
        let n = data.rows();
        let upper = 1.0 / (nu * n as f64);
        // Feasible start: fill the first rows to the box bound until the mass is 1.
        let mut alpha = vec![0.0; n];
        let mut left = 1.0;
        for a in alpha.iter_mut() {
            if left <= 0.0 {
                break;
            }
            *a = upper.min(left);
            left -= *a;
        }
        let mut cache = KernelCache::new(data, gamma, cache_rows);
        let mut grad = vec![0.0; n];
        for (i, &a) in alpha.iter().enumerate() {
            if a > 0.0 {
                let row = cache.row(i);
                for (g, k) in grad.iter_mut().zip(row) {
                    *g += a * k;
                }
            }
        }
        Self { cache, alpha, grad, upper, tol, iterations: 0 }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn upper_bound(&self) -> f64 {
        self.upper
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `½ αᵀ K α`.
    pub fn objective(&self) -> f64 {
        0.5 * self.alpha.iter().zip(&self.grad).map(|(a, g)| a * g).sum::<f64>()
    }

    /// Maximal violating pair `(i, j)` and its KKT gap `G_j - G_i`;
    /// mass moves from `j` to `i`.
    fn select(&self) -> Option<(usize, usize, f64)> {
        let mut i = None;
        let mut j = None;
        for t in 0..self.alpha.len() {
            if self.alpha[t] < self.upper && i.is_none_or(|i: usize| self.grad[t] < self.grad[i]) {
                i = Some(t);
            }
            if self.alpha[t] > 0.0 && j.is_none_or(|j: usize| self.grad[t] > self.grad[j]) {
                j = Some(t);
            }
        }
        let (i, j) = (i?, j?);
        Some((i, j, self.grad[j] - self.grad[i]))
    }

    pub fn gap(&self) -> f64 {
        self.select().map_or(0.0, |(_, _, g)| g.max(0.0))
    }

    /// One pair update. Returns `false` once the KKT gap is below `tol`.
    pub fn step(&mut self) -> bool {
        let Some((i, j, gap)) = self.select() else { return false };
        if gap < self.tol || i == j {
            return false;
        }
        let k_ij = self.cache.row(i)[j];
        let eta = (2.0 - 2.0 * k_ij).max(TAU);
        let d = (gap / eta).min(self.upper - self.alpha[i]).min(self.alpha[j]);
        if d <= 0.0 {
            return false;
        }
        self.alpha[i] += d;
        self.alpha[j] -= d;
        if self.alpha[j] < ALPHA_PRUNE * 1e-3 {
            self.alpha[j] = 0.0;
        }
        let row_i = self.cache.row(i).to_vec();
        let row_j = self.cache.row(j);
        for ((g, ki), kj) in self.grad.iter_mut().zip(&row_i).zip(row_j) {
            *g += d * (ki - kj);
        }
        self.iterations += 1;
        true
    }

    /// Offset: mean gradient over margin support vectors, or the midpoint of
    /// the KKT interval when every support vector sits at a bound.
    pub fn rho(&self) -> f64 {
        let free: Vec<f64> = self
            .alpha
            .iter()
            .zip(&self.grad)
            .filter(|(&a, _)| a > ALPHA_PRUNE && a < self.upper - ALPHA_PRUNE)
            .map(|(_, &g)| g)
            .collect();
        if !free.is_empty() {
            return free.iter().sum::<f64>() / free.len() as f64;
        }
        let mut at_upper = f64::NEG_INFINITY;
        let mut at_zero = f64::INFINITY;
        for (&a, &g) in self.alpha.iter().zip(&self.grad) {
            if a >= self.upper - ALPHA_PRUNE {
                at_upper = at_upper.max(g);
            } else if a <= ALPHA_PRUNE {
                at_zero = at_zero.min(g);
            }
        }
        match (at_upper.is_finite(), at_zero.is_finite()) {
            (true, true) => 0.5 * (at_upper + at_zero),
            (true, false) => at_upper,
            (false, true) => at_zero,
            (false, false) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsvmModel {
    pub support_vectors: Matrix,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub nu: f64,
    /// Rows the dual was solved over (after subsampling).
    pub n_train: usize,
    pub iterations: usize,
    pub objective: f64,
}

impl OcsvmModel {
    pub fn fit(data: &Matrix, config: &OcsvmConfig) -> Result<Self, OcsvmError> {
        if data.rows() == 0 {
            return Err(OcsvmError::Empty);
        }
        if !(config.nu > 0.0 && config.nu <= 1.0) {
            return Err(OcsvmError::Nu(config.nu));
        }
        if !(config.gamma > 0.0 && config.gamma.is_finite()) {
            return Err(OcsvmError::Gamma(config.gamma));
        }
        let train = match config.subsample_cap {
            Some(cap) if data.rows() > cap => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let mut idx = index::sample(&mut rng, data.rows(), cap).into_vec();
                idx.sort_unstable();
                data.select_rows(&idx)
            }
            _ => data.clone(),
        };

        let mut solver = SmoSolver::new(&train, config.nu, config.gamma, config.tol, config.cache_rows);
        while solver.step() {
            if solver.iterations() >= config.max_passes {
                return Err(OcsvmError::NotConverged { iterations: solver.iterations(), residual: solver.gap() });
            }
        }
        let rho = solver.rho();
        let objective = solver.objective();
        let keep: Vec<usize> = (0..train.rows()).filter(|&i| solver.alphas()[i] > ALPHA_PRUNE).collect();
        Ok(Self {
            support_vectors: train.select_rows(&keep),
            alphas: keep.iter().map(|&i| solver.alphas()[i]).collect(),
            rho,
            gamma: config.gamma,
            nu: config.nu,
            n_train: train.rows(),
            iterations: solver.iterations(),
            objective,
        })
    }

    /// `Σ αᵢ K(svᵢ, x) − ρ`; negative means anomalous.
    pub fn decision(&self, x: &[f64]) -> Result<f64, OcsvmError> {
        if x.len() != self.support_vectors.cols() {
            return Err(OcsvmError::Dimension(self.support_vectors.cols(), x.len()));
        }
        let s: f64 = self
            .support_vectors
            .iter_rows()
            .zip(&self.alphas)
            .map(|(sv, a)| a * (-self.gamma * squared_distance(sv, x)).exp())
            .sum();
        Ok(s - self.rho)
    }

    pub fn decision_matrix(&self, data: &Matrix) -> Result<Vec<f64>, OcsvmError> {
        data.iter_rows().map(|r| self.decision(r)).collect()
    }

    pub fn flag(decisions: &[f64]) -> Vec<bool> {
        decisions.iter().map(|&d| d < 0.0).collect()
    }

    pub fn upper_bound(&self) -> f64 {
        1.0 / (self.nu * self.n_train as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blob(n: usize, dims: usize, sd: f64, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sd).unwrap();
        Matrix::from_vec(n, dims, (0..n * dims).map(|_| normal.sample(&mut rng)).collect())
    }

    #[test]
    fn kernel_values() {
        assert_eq!(rbf_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.1).unwrap(), 1.0);
        // ||x - y||^2 = 10.
        let k = rbf_kernel(&[0.0, 0.0], &[1.0, 3.0], 0.1).unwrap();
        assert_abs_diff_eq!(k, (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(k, 0.3678794, epsilon = 1e-7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(rbf_kernel(&x, &y, 0.1).unwrap(), rbf_kernel(&y, &x, 0.1).unwrap());
        }
        assert_eq!(rbf_kernel(&[0.0], &[0.0, 1.0], 0.1), Err(OcsvmError::Dimension(1, 2)));
    }

    #[test]
    fn single_point() {
        let data = Matrix::from_vec(1, 2, vec![0.5, -0.5]);
        let cfg = OcsvmConfig { subsample_cap: None, ..Default::default() };
        let m = OcsvmModel::fit(&data, &cfg).unwrap();
        assert_eq!(m.alphas, vec![1.0]);
        assert_abs_diff_eq!(m.rho, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.decision(&[0.5, -0.5]).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn feasibility_and_monotone_descent_every_step() {
        let data = blob(300, 2, 1.0, 3);
        let mut solver = SmoSolver::new(&data, 0.05, 0.1, 1e-6, 64);
        let c = solver.upper_bound();
        let mut last = solver.objective();
        while solver.step() {
            let sum: f64 = solver.alphas().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(solver.alphas().iter().all(|&a| (0.0..=c + 1e-15).contains(&a)));
            let obj = solver.objective();
            assert!(obj <= last + 1e-10, "objective rose {last} -> {obj}");
            last = obj;
        }
        assert!(solver.gap() < 1e-6);
    }

    /// Accelerated projected gradient on the capped simplex.
    fn qp_oracle(k: &[Vec<f64>], upper: f64, iters: usize) -> Vec<f64> {
        let n = k.len();
        let project = |v: &[f64]| -> Vec<f64> {
            let (mut lo, mut hi) = (-2.0 - upper, 2.0 + v.iter().cloned().fold(f64::MIN, f64::max));
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let s: f64 = v.iter().map(|x| (x - mid).clamp(0.0, upper)).sum();
                if s > 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let tau = 0.5 * (lo + hi);
            v.iter().map(|x| (x - tau).clamp(0.0, upper)).collect()
        };
        let lipschitz: f64 = (0..n).map(|i| k[i].iter().sum::<f64>()).fold(0.0, f64::max);
        let step = 1.0 / lipschitz;
        let mut x = vec![1.0 / n as f64; n];
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..iters {
            let grad: Vec<f64> = (0..n).map(|i| k[i].iter().zip(&y).map(|(a, b)| a * b).sum()).collect();
            let z: Vec<f64> = y.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let x_next = project(&z);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = x_next.iter().zip(&x).map(|(a, b)| a + (t - 1.0) / t_next * (a - b)).collect();
            x = x_next;
            t = t_next;
        }
        x
    }

    #[test]
    fn objective_matches_dense_qp_reference() {
        let data = blob(500, 2, 0.3, 7);
        let cfg = OcsvmConfig { nu: 0.05, tol: 1e-7, subsample_cap: None, ..Default::default() };
        let model = OcsvmModel::fit(&data, &cfg).unwrap();
        let k: Vec<Vec<f64>> = data
            .iter_rows()
            .map(|a| data.iter_rows().map(|b| rbf_kernel(a, b, 0.1).unwrap()).collect())
            .collect();
        let alpha = qp_oracle(&k, model.upper_bound(), 3000);
        let oracle_obj: f64 = 0.5
            * (0..500).map(|i| alpha[i] * (0..500).map(|j| k[i][j] * alpha[j]).sum::<f64>()).sum::<f64>();
        assert!((model.objective - oracle_obj).abs() < 1e-4, "smo {} oracle {}", model.objective, oracle_obj);

        // Oracle decision at the centroid agrees in sign and is positive.
        let centroid = [0.0, 0.0];
        let oracle_sum: f64 = (0..500).map(|i| alpha[i] * rbf_kernel(data.row(i), &centroid, 0.1).unwrap()).sum();
        let f = model.decision(&centroid).unwrap();
        assert!(f > 0.0);
        assert!((oracle_sum - model.rho - f).abs() < 1e-3);
    }

    #[test]
    fn converged_fit_is_feasible_and_nu_property_holds() {
        let data = blob(2000, 4, 1.0, 11);
        let cfg = OcsvmConfig { nu: 0.01, ..Default::default() };
        let m = OcsvmModel::fit(&data, &cfg).unwrap();
        let c = m.upper_bound();
        assert!((m.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(m.alphas.iter().all(|&a| a > 0.0 && a <= c + 1e-15));
        let n: f64 = 2000.0;
        assert!(m.alphas.len() as f64 >= (0.01 * n).ceil());
        let d = m.decision_matrix(&data).unwrap();
        let outliers = OcsvmModel::flag(&d).iter().filter(|f| **f).count() as f64 / n;
        let sv_frac = m.alphas.len() as f64 / n;
        assert!(outliers <= 0.01 + cfg.tol, "outlier fraction {outliers}");
        assert!(0.01 <= sv_frac);

        // Margin support vectors sit on the boundary.
        for (sv, &a) in m.support_vectors.iter_rows().zip(&m.alphas) {
            if a < c - 1e-9 {
                assert!(m.decision(sv).unwrap().abs() <= cfg.tol);
            }
        }
    }

    #[test]
    fn training_flag_rate_near_nu() {
        let data = blob(5000, 4, 1.0, 13);
        let m = OcsvmModel::fit(&data, &OcsvmConfig::default()).unwrap();
        let d = m.decision_matrix(&data).unwrap();
        let frac = OcsvmModel::flag(&d).iter().filter(|f| **f).count() as f64 / 5000.0;
        assert!((0.005..=0.02).contains(&frac), "flag fraction {frac}");
    }

    #[test]
    fn decision_is_permutation_invariant() {
        let data = blob(400, 3, 1.0, 5);
        let m = OcsvmModel::fit(&data, &OcsvmConfig { nu: 0.1, ..Default::default() }).unwrap();
        let mut order: Vec<usize> = (0..m.alphas.len()).collect();
        order.reverse();
        let permuted = OcsvmModel {
            support_vectors: m.support_vectors.select_rows(&order),
            alphas: order.iter().map(|&i| m.alphas[i]).collect(),
            ..m.clone()
        };
        for x in data.iter_rows().take(50) {
            let a = m.decision(x).unwrap();
            let b = permuted.decision(x).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let data = blob(10, 2, 1.0, 0);
        assert_eq!(OcsvmModel::fit(&Matrix::zeros(0, 2), &OcsvmConfig::default()), Err(OcsvmError::Empty));
        assert_eq!(
            OcsvmModel::fit(&data, &OcsvmConfig { nu: 0.0, ..Default::default() }),
            Err(OcsvmError::Nu(0.0))
        );
        let stalled = OcsvmModel::fit(&blob(200, 2, 1.0, 1), &OcsvmConfig { max_passes: 1, tol: 1e-9, ..Default::default() });
        assert!(matches!(stalled, Err(OcsvmError::NotConverged { iterations: 1, .. })));
    }
}
