use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ClusterError;
use crate::matrix::{squared_distance, Matrix};

pub const NOISE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_samples: usize,
    /// Row count above which the uniform-grid index replaces the full scan.
    pub grid_threshold: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self { eps: 0.25, min_samples: 5, grid_threshold: 20_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborSearch {
    Naive,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbscanResult {
    pub labels: Vec<i64>,
    pub core: Vec<bool>,
    pub n_clusters: usize,
    pub eps: f64,
    pub min_samples: usize,
}

impl DbscanResult {
    pub fn noise_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == NOISE).count() as f64 / self.labels.len() as f64
    }
}

enum Index<'a> {
    Naive(&'a Matrix),
    Grid { data: &'a Matrix, eps: f64, cells: HashMap<Vec<i64>, Vec<usize>>, offsets: Vec<Vec<i64>> },
}

fn cell_of(x: &[f64], eps: f64) -> Vec<i64> {
    x.iter().map(|v| (v / eps).floor() as i64).collect()
}

impl<'a> Index<'a> {
    fn grid(data: &'a Matrix, eps: f64) -> Self {
        let mut cells: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, r) in data.iter_rows().enumerate() {
            cells.entry(cell_of(r, eps)).or_default().push(i);
        }
        let mut offsets = vec![Vec::new()];
        for _ in 0..data.cols() {
            offsets = offsets
                .into_iter()
                .flat_map(|o: Vec<i64>| {
                    (-1..=1).map(move |d| {
                        let mut next = o.clone();
                        next.push(d);
                        next
                    })
                })
                .collect();
        }
        Index::Grid { data, eps, cells, offsets }
    }

    /// Calls `f(j, d²)` for every row within `eps` of row `i`, itself included.
    fn for_each_neighbor(&self, i: usize, eps2: f64, mut f: impl FnMut(usize, f64)) {
        match self {
            Index::Naive(data) => {
                let x = data.row(i);
                for (j, r) in data.iter_rows().enumerate() {
                    let d = squared_distance(x, r);
                    if d <= eps2 {
                        f(j, d);
                    }
                }
            }
            Index::Grid { data, eps, cells, offsets } => {
                let x = data.row(i);
                let home = cell_of(x, *eps);
                let mut key = home.clone();
                for off in offsets {
                    for ((k, h), o) in key.iter_mut().zip(&home).zip(off) {
                        *k = h + o;
                    }
                    if let Some(members) = cells.get(&key) {
                        for &j in members {
                            let d = squared_distance(x, data.row(j));
                            if d <= eps2 {
                                f(j, d);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn dbscan(data: &Matrix, config: &DbscanConfig) -> Result<DbscanResult, ClusterError> {
    let search = if data.rows() > config.grid_threshold { NeighborSearch::Grid } else { NeighborSearch::Naive };
    dbscan_with(data, config.eps, config.min_samples, search)
}

/// Core points within `eps` of each other form clusters; a border point joins
/// the cluster of its nearest core point (lowest index on ties). Cluster ids
/// follow the lowest row index among members.
pub fn dbscan_with(
    data: &Matrix,
    eps: f64,
    min_samples: usize,
    search: NeighborSearch,
) -> Result<DbscanResult, ClusterError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(ClusterError::Parameter(format!("eps must be positive, got {eps}")));
    }
    if min_samples == 0 {
        return Err(ClusterError::Parameter("min_samples must be at least 1".into()));
    }
    let n = data.rows();
    let eps2 = eps * eps;
    let index = match search {
        NeighborSearch::Naive => Index::Naive(data),
        NeighborSearch::Grid => Index::grid(data, eps),
    };

    let core: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut count = 0;
            index.for_each_neighbor(i, eps2, |_, _| count += 1);
            count >= min_samples
        })
        .collect();

    let mut component = vec![usize::MAX; n];
    let mut n_components = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !core[start] || component[start] != usize::MAX {
            continue;
        }
        component[start] = n_components;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            index.for_each_neighbor(p, eps2, |q, _| {
                if core[q] && component[q] == usize::MAX {
                    component[q] = n_components;
                    queue.push_back(q);
                }
            });
        }
        n_components += 1;
    }

    let border: Vec<Option<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if core[i] {
                return None;
            }
            let mut best: Option<(f64, usize)> = None;
            index.for_each_neighbor(i, eps2, |j, d| {
                if core[j] && best.is_none_or(|(bd, bj)| d < bd || (d == bd && j < bj)) {
                    best = Some((d, j));
                }
            });
            best.map(|(_, j)| component[j])
        })
        .collect();
    for (i, b) in border.into_iter().enumerate() {
        if let Some(c) = b {
            component[i] = c;
        }
    }

    // Components are discovered in order of their lowest core row; a border
    // row can be lower still, so renumber by the lowest member.
    let mut first_member = vec![usize::MAX; n_components];
    for (i, &c) in component.iter().enumerate() {
        if c != usize::MAX && first_member[c] == usize::MAX {
            first_member[c] = i;
        }
    }
    let mut order: Vec<usize> = (0..n_components).collect();
    order.sort_by_key(|&c| first_member[c]);
    let mut rename = vec![0i64; n_components];
    for (new, &old) in order.iter().enumerate() {
        rename[old] = new as i64;
    }
    let labels = component.iter().map(|&c| if c == usize::MAX { NOISE } else { rename[c] }).collect();

    Ok(DbscanResult { labels, core, n_clusters: n_components, eps, min_samples })
}

/// Ascending distances from each row to its `k`-th nearest other row.
pub fn k_distance(data: &Matrix, k: usize) -> Result<Vec<f64>, ClusterError> {
    let n = data.rows();
    if k == 0 || n <= k {
        return Err(ClusterError::TooFewRows { n, need: k + 1 });
    }
    let mut out: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = data.row(i);
            let mut nearest = vec![f64::INFINITY; k];
            for (j, r) in data.iter_rows().enumerate() {
                if j == i {
                    continue;
                }
                let d = squared_distance(x, r);
                if d < nearest[k - 1] {
                    let pos = nearest.partition_point(|&v| v <= d);
                    nearest.insert(pos, d);
                    nearest.pop();
                }
            }
            nearest[k - 1].sqrt()
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::distance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Union-find DBSCAN reference over explicit all-pairs distances.
    fn oracle(data: &Matrix, eps: f64, min_samples: usize) -> Vec<i64> {
        let n = data.rows();
        let near = |i: usize, j: usize| squared_distance(data.row(i), data.row(j)) <= eps * eps;
        let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_samples).collect();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for i in 0..n {
            for j in 0..n {
                if core[i] && core[j] && near(i, j) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut root: Vec<Option<usize>> = vec![None; n];
        for i in 0..n {
            if core[i] {
                root[i] = Some(find(&mut parent, i));
            } else {
                let mut best: Option<(f64, usize)> = None;
                for j in 0..n {
                    if core[j] && near(i, j) {
                        let d = squared_distance(data.row(i), data.row(j));
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, j));
                        }
                    }
                }
                root[i] = best.map(|(_, j)| find(&mut parent, j));
            }
        }
        let mut ids: Vec<usize> = Vec::new();
        root.iter()
            .map(|r| match r {
                None => NOISE,
                Some(r) => match ids.iter().position(|x| x == r) {
                    Some(p) => p as i64,
                    None => {
                        ids.push(*r);
                        (ids.len() - 1) as i64
                    }
                },
            })
            .collect()
    }

    fn random_corpus(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let centers: Vec<[f64; 4]> = (0..3).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()
                } else {
                    let c = centers[rng.random_range(0..3)];
                    c.iter().map(|m| m + rng.random_range(-0.3..0.3)).collect()
                }
            })
            .collect();
        Matrix::from_rows(&rows)
    }

    #[test]
    fn matches_union_find_oracle_on_random_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = rng.random_range(20..=300);
            let data = random_corpus(&mut rng, n);
            let expected = oracle(&data, 0.25, 5);
            for search in [NeighborSearch::Naive, NeighborSearch::Grid] {
                assert_eq!(dbscan_with(&data, 0.25, 5, search).unwrap().labels, expected);
            }
        }
    }

    #[test]
    fn structural_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_corpus(&mut rng, 400);
        let r = dbscan(&data, &DbscanConfig::default()).unwrap();
        for i in 0..400 {
            let neigh: Vec<usize> = (0..400).filter(|&j| distance(data.row(i), data.row(j)) <= 0.25).collect();
            if r.core[i] {
                assert!(neigh.len() >= 5);
            }
            if r.labels[i] == NOISE {
                assert!(!r.core[i]);
                assert!(neigh.iter().all(|&j| !r.core[j]));
            }
        }
    }

    #[test]
    fn permutation_invariant_up_to_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_corpus(&mut rng, 300);
        let base = dbscan(&data, &DbscanConfig::default()).unwrap().labels;
        let perm: Vec<usize> = (0..300).rev().collect();
        let shuffled = dbscan(&data.select_rows(&perm), &DbscanConfig::default()).unwrap().labels;
        let mut map = HashMap::new();
        for (pos, &orig) in perm.iter().enumerate() {
            let (a, b) = (base[orig], shuffled[pos]);
            assert_eq!(a == NOISE, b == NOISE);
            assert_eq!(*map.entry(a).or_insert(b), b);
        }
    }

    #[test]
    fn degenerate_cases() {
        let same = Matrix::from_vec(10, 2, vec![1.5; 20]);
        let r = dbscan(&same, &DbscanConfig::default()).unwrap();
        assert_eq!(r.labels, vec![0; 10]);
        assert_eq!(r.noise_fraction(), 0.0);

        let line = Matrix::from_rows(&(0..50).map(|i| [i as f64]).collect::<Vec<_>>());
        let r = dbscan_with(&line, 1e-9, 5, NeighborSearch::Naive).unwrap();
        assert!(r.labels.iter().all(|&l| l == NOISE));

        assert!(dbscan_with(&line, 0.0, 5, NeighborSearch::Naive).is_err());
        assert!(dbscan_with(&line, 1.0, 0, NeighborSearch::Naive).is_err());
    }

    #[test]
    fn isolated_point_is_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows: Vec<Vec<f64>> = (0..499)
            .map(|i| {
                let c = if i % 2 == 0 { 0.0 } else { 5.0 };
                (0..4).map(|_| c + rng.random_range(-0.2..0.2)).collect()
            })
            .collect();
        rows.push(vec![20.0; 4]);
        let data = Matrix::from_rows(&rows);
        let r = dbscan(&data, &DbscanConfig::default()).unwrap();
        assert_eq!(r.labels, oracle(&data, 0.25, 5));
        assert_eq!(r.labels[499], NOISE);
        assert_eq!(r.labels[0], 0);
        assert_eq!(r.labels[1], 1);
    }

    #[test]
    fn grid_switch_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_corpus(&mut rng, 600);
        let naive = dbscan(&data, &DbscanConfig::default()).unwrap();
        let grid = dbscan(&data, &DbscanConfig { grid_threshold: 100, ..Default::default() }).unwrap();
        assert_eq!(naive, grid);
    }

    #[test]
    fn k_distance_examples() {
        let line = Matrix::from_rows(&(0..20).map(|i| [i as f64]).collect::<Vec<_>>());
        let kd = k_distance(&line, 5).unwrap();
        assert!(kd.windows(2).all(|w| w[0] <= w[1]));
        // Rows 2..=17 see neighbours at 1, 1, 2, 2, 3.
        assert_eq!(kd.iter().filter(|&&d| d == 3.0).count(), 20 - 4);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = random_corpus(&mut rng, 300);
        let mut expected: Vec<f64> = (0..300)
            .map(|i| {
                let mut d: Vec<f64> =
                    (0..300).filter(|&j| j != i).map(|j| distance(data.row(i), data.row(j))).collect();
                d.sort_by(f64::total_cmp);
                d[4]
            })
            .collect();
        expected.sort_by(f64::total_cmp);
        let got = k_distance(&data, 5).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(k_distance(&Matrix::zeros(5, 2), 5).is_err());
    }
}
