//! Nearest-rank percentiles.
//!
//! Every threshold in the crate (amount cap, detector cut-offs, high-risk
//! marks, the ARF running percentile) goes through this one rule so that the
//! same corpus always yields the same cut regardless of which stage asks.

/// 1-based nearest rank `ceil(q * n)`, clamped to `[1, n]`.
///
/// A small guard absorbs binary rounding in `q * n` (0.99 * 100 must be rank
/// 99, not 100).
pub fn nearest_rank(q: f64, n: usize) -> usize {
    debug_assert!(n > 0);
    let raw = (q * n as f64 - 1e-9).ceil();
    if raw < 1.0 {
        1
    } else {
        (raw as usize).min(n)
    }
}

/// Nearest-rank quantile of `values`. Returns `None` on empty input.
pub fn quantile<T: Copy + PartialOrd>(values: &[T], q: f64) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("quantile over unordered values"));
    Some(sorted[nearest_rank(q, sorted.len()) - 1])
}

/// Quantile of an already ascending slice.
pub fn quantile_sorted<T: Copy>(sorted: &[T], q: f64) -> Option<T> {
    if sorted.is_empty() {
        None
    } else {
        Some(sorted[nearest_rank(q, sorted.len()) - 1])
    }
}

/// Marks exactly `n - nearest_rank(1 - fraction, n)` rows: the highest scores,
/// ties resolved in favour of the lower row index.
pub fn top_fraction(scores: &[f64], fraction: f64) -> Vec<bool> {
    let n = scores.len();
    let mut flags = vec![false; n];
    if n == 0 {
        return flags;
    }
    let keep = n - nearest_rank(1.0 - fraction, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &i in order.iter().take(keep) {
        flags[i] = true;
    }
    flags
}
