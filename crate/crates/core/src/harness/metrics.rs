//! Confusion-matrix rates and rank-based AUC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {labels} labels, {flags} flags, {scores} scores")]
    Length { labels: usize, flags: usize, scores: usize },
    #[error("need at least one positive and one negative label ({positives} positive, {negatives} negative)")]
    Degenerate { positives: usize, negatives: usize },
    #[error("non-finite score at row {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub detector: String,
    pub subset: String,
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    pub precision: f64,
    pub auc_roc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub seed: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, detector: &str, subset: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.detector == detector && r.subset == subset)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "detector",
            "subset",
            "n",
            "tp",
            "fp",
            "tn",
            "fn",
            "detection_rate_pct",
            "false_positive_rate_pct",
            "precision_pct",
            "auc_roc",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.detector.clone(),
                r.subset.clone(),
                r.n.to_string(),
                r.tp.to_string(),
                r.fp.to_string(),
                r.tn.to_string(),
                r.fn_.to_string(),
                format!("{:.2}", 100.0 * r.detection_rate),
                format!("{:.2}", 100.0 * r.false_positive_rate),
                format!("{:.2}", 100.0 * r.precision),
                format!("{:.4}", r.auc_roc),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check(labels: &[bool], scores: &[f64]) -> Result<(usize, usize), MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::Length { labels: labels.len(), flags: labels.len(), scores: scores.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::Degenerate { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Area under the ROC curve from the Mann–Whitney U statistic; tied scores
/// share their average rank.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricsError> {
    let (p, n) = check(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn metrics(
    detector: &str,
    subset: &str,
    labels: &[bool],
    flags: &[bool],
    scores: &[f64],
) -> Result<EvalRow, MetricsError> {
    if flags.len() != labels.len() {
        return Err(MetricsError::Length { labels: labels.len(), flags: flags.len(), scores: scores.len() });
    }
    let auc_roc = auc(labels, scores)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&l, &f) in labels.iter().zip(flags) {
        match (l, f) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalRow {
        detector: detector.to_string(),
        subset: subset.to_string(),
        n: labels.len(),
        tp,
        fp,
        tn,
        fn_,
        detection_rate: ratio(tp, tp + fn_),
        false_positive_rate: ratio(fp, fp + tn),
        precision: ratio(tp, tp + fp),
        auc_roc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise(labels: &[bool], scores: &[f64]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / pairs
    }

    #[test]
    fn perfect_and_inverted() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&labels, &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&labels, &[0.9, 0.8, 0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(auc(&labels, &[0.5; 4]).unwrap(), 0.5);
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..30 {
            let n = rng.random_range(2..=500);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            labels[0] = true;
            labels[1] = false;
            let coarse = trial % 2 == 0;
            let scores: Vec<f64> = (0..n)
                .map(|_| if coarse { f64::from(rng.random_range(0..5u8)) } else { rng.random::<f64>() })
                .collect();
            let a = auc(&labels, &scores).unwrap();
            assert!((a - pairwise(&labels, &scores)).abs() <= 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn confusion_counts_reconcile() {
        let labels = [true, true, false, false, false];
        let flags = [true, false, true, false, false];
        let r = metrics("x", "all", &labels, &flags, &[0.9, 0.1, 0.8, 0.2, 0.3]).unwrap();
        assert_eq!((r.tp, r.fn_, r.fp, r.tn), (1, 1, 1, 2));
        assert_eq!(r.tp + r.fp + r.tn + r.fn_, r.n);
        assert_eq!(r.detection_rate, 0.5);
        assert!((r.false_positive_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.precision, 0.5);
        let none = metrics("x", "all", &labels, &[false; 5], &[0.0; 5]).unwrap();
        assert_eq!(none.precision, 0.0);
    }

    #[test]
    fn degenerate_labels_rejected() {
        assert_eq!(auc(&[true, true], &[0.1, 0.2]), Err(MetricsError::Degenerate { positives: 2, negatives: 0 }));
        assert!(matches!(metrics("x", "a", &[true], &[true, false], &[0.0]), Err(MetricsError::Length { .. })));
        assert_eq!(auc(&[true, false], &[f64::NAN, 0.0]), Err(MetricsError::NonFinite(0)));
    }
}
