use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub means: Vec<f64>,
    /// Unit-length directions, strongest first.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues descending and the matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if m[p][q].abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| m[y][y].total_cmp(&m[x][x]).then(x.cmp(&y)));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    (values, vectors)
}

/// Flips `v` so its largest-magnitude coordinate (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[idx].abs() {
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

impl PcaModel {
    pub fn fit(data: &Matrix, n_components: usize) -> Result<Self, ClusterError> {
        let (n, d) = (data.rows(), data.cols());
        if n < 2 {
            return Err(ClusterError::TooFewRows { n, need: 2 });
        }
        let means: Vec<f64> = (0..d).map(|j| data.column(j).iter().sum::<f64>() / n as f64).collect();
        let mut cov = vec![vec![0.0; d]; d];
        for row in data.iter_rows() {
            for i in 0..d {
                let ci = row[i] - means[i];
                for j in i..d {
                    cov[i][j] += ci * (row[j] - means[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i][j] /= (n - 1) as f64;
                cov[j][i] = cov[i][j];
            }
        }
        let (values, vectors) = jacobi_eigen(&cov);
        let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
        let keep = n_components.min(d);
        let explained_variance: Vec<f64> = values.iter().take(keep).map(|v| v.max(0.0)).collect();
        let explained_variance_ratio =
            explained_variance.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
        let components = vectors
            .into_iter()
            .take(keep)
            .map(|mut v| {
                fix_sign(&mut v);
                v
            })
            .collect();
        Ok(Self { means, components, explained_variance, explained_variance_ratio })
    }

    pub fn project_row(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.means).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn project(&self, data: &Matrix) -> Matrix {
        let rows: Vec<Vec<f64>> = data.iter_rows().map(|r| self.project_row(r)).collect();
        Matrix::from_vec(data.rows(), self.components.len(), rows.concat())
    }

    /// Reconstruction from the first `k` components.
    pub fn reconstruct_row(&self, x: &[f64], k: usize) -> Vec<f64> {
        let scores = self.project_row(x);
        let mut out = self.means.clone();
        for (c, s) in self.components.iter().zip(&scores).take(k) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += s * ci;
            }
        }
        out
    }
}

/// Two-component projection.
pub fn pca_project(data: &Matrix) -> Result<(PcaModel, Matrix), ClusterError> {
    let model = PcaModel::fit(data, 2)?;
    let projected = model.project(data);
    Ok((model, projected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::squared_distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a: f64 = rng.random_range(-3.0..3.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                vec![a + b, 2.0 * a - b, rng.random_range(-0.5..0.5), a * 0.3 + rng.random_range(-0.1..0.1)]
            })
            .collect();
        Matrix::from_rows(&rows)
    }

    #[test]
    fn eigenvalues_match_nalgebra() {
        let data = random_data(200, 1);
        let model = PcaModel::fit(&data, 4).unwrap();
        let means = &model.means;
        let mut cov = nalgebra::DMatrix::<f64>::zeros(4, 4);
        for r in data.iter_rows() {
            let c = nalgebra::DVector::from_iterator(4, r.iter().zip(means).map(|(x, m)| x - m));
            cov += &c * c.transpose();
        }
        cov /= 199.0;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut expected: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in model.explained_variance.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn components_orthonormal_and_signed() {
        let model = PcaModel::fit(&random_data(500, 2), 2).unwrap();
        let c = &model.components;
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&c[0], &c[0]) - 1.0).abs() < 1e-9);
        assert!((dot(&c[1], &c[1]) - 1.0).abs() < 1e-9);
        assert!(dot(&c[0], &c[1]).abs() < 1e-9);
        for v in c {
            let max = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max > 0.0);
        }
        assert!(model.explained_variance[0] >= model.explained_variance[1]);
        assert!(model.explained_variance[1] >= 0.0);
    }

    #[test]
    fn collinear_data_is_rank_one() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| {
            let t = i as f64 * 0.37 - 4.0;
            vec![t, 2.0 * t + 1.0, -t, 0.5 * t]
        }).collect();
        let (model, _) = pca_project(&Matrix::from_rows(&rows)).unwrap();
        assert!((model.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn projection_is_centered_and_reconstruction_improves() {
        let data = random_data(300, 3);
        let (model, proj) = pca_project(&data).unwrap();
        for j in 0..2 {
            let mean = proj.column(j).iter().sum::<f64>() / 300.0;
            assert!(mean.abs() < 1e-12);
        }
        let err = |k| data.iter_rows().map(|r| squared_distance(r, &model.reconstruct_row(r, k))).sum::<f64>();
        assert!(err(2) <= err(1));
        assert!(PcaModel::fit(&Matrix::zeros(1, 4), 2).is_err());
    }
}
