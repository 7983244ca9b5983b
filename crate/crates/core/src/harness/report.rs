//! CSV summaries and SVG charts for a finished run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, Timelike};

use super::svg::{self, FiveNumber, Series};
use crate::autoencoder::TrainHistory;
use crate::cluster::NOISE;
use crate::ingest::CleanTransaction;
use crate::matrix::Matrix;
use crate::quantile::quantile_sorted;
use crate::risk::{EntityRisk, RiskTable, TimeWindowStats, INDICATOR_NAMES};

const SCATTER_BACKGROUND: usize = 4000;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

/// Equal-width bins over `[lo, hi]`; the top edge belongs to the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    assert!(bins > 0 && hi > lo, "histogram needs bins > 0 and hi > lo");
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    let (mut below, mut above) = (0, 0);
    for &v in values {
        if v < lo {
            below += 1;
        } else if v > hi {
            above += 1;
        } else {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    Histogram { edges, counts, below, above }
}

/// Min, nearest-rank quartiles and max. `None` for an empty group.
pub fn five_number(values: &[f64]) -> Option<FiveNumber> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(FiveNumber {
        min: *v.first()?,
        q1: quantile_sorted(&v, 0.25)?,
        median: quantile_sorted(&v, 0.5)?,
        q3: quantile_sorted(&v, 0.75)?,
        max: *v.last()?,
    })
}

pub struct ReportInputs<'a> {
    pub txns: &'a [CleanTransaction],
    pub detector_scores: [(&'a str, &'a [f64], &'a [bool]); 3],
    pub projection: &'a Matrix,
    pub kmeans_labels: &'a [usize],
    pub dbscan_labels: &'a [i64],
    pub elbow: &'a [(usize, f64)],
    pub k_distance: &'a [f64],
    pub risk: &'a RiskTable,
    pub cardholders: &'a [EntityRisk],
    pub merchants: &'a [EntityRisk],
    pub windows: &'a [TimeWindowStats],
    pub correlations: &'a [[f64; 8]; 8],
    pub history: &'a TrainHistory,
}

struct Out<'a> {
    dir: &'a Path,
    svg: bool,
}

impl Out<'_> {
    fn csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()
    }

    fn svg(&self, name: &str, content: impl FnOnce() -> String) -> std::io::Result<()> {
        if self.svg {
            std::fs::File::create(self.dir.join(name))?.write_all(content().as_bytes())?;
        }
        Ok(())
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn histogram_rows(h: &Histogram) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> =
        h.counts.iter().enumerate().map(|(i, c)| vec![f(h.edges[i]), f(h.edges[i + 1]), c.to_string()]).collect();
    rows.push(vec!["-inf".into(), f(h.edges[0]), h.below.to_string()]);
    rows.push(vec![f(*h.edges.last().expect("edges")), "inf".into(), h.above.to_string()]);
    rows
}

fn grouped_boxes(
    out: &Out,
    name: &str,
    title: &str,
    keys: impl Iterator<Item = (u32, f64)>,
    label: impl Fn(u32) -> String,
) -> std::io::Result<()> {
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (k, v) in keys {
        groups.entry(k).or_default().push(v);
    }
    let summary: Vec<(String, FiveNumber, usize)> = groups
        .iter()
        .filter_map(|(k, v)| five_number(v).map(|b| (label(*k), b, v.len())))
        .collect();
    out.csv(
        &format!("{name}.csv"),
        &["group", "count", "min", "q1", "median", "q3", "max"],
        summary.iter().map(|(l, b, n)| vec![l.clone(), n.to_string(), f(b.min), f(b.q1), f(b.median), f(b.q3), f(b.max)]),
    )?;
    out.svg(&format!("{name}.svg"), || {
        let labels: Vec<String> = summary.iter().map(|s| s.0.clone()).collect();
        let boxes: Vec<FiveNumber> = summary.iter().map(|s| s.1).collect();
        svg::box_chart(title, "amount", &labels, &boxes)
    })
}

/// Every flagged point plus an evenly spaced subset of the rest.
fn scatter_rows(flags: &[bool]) -> Vec<usize> {
    let normal = flags.iter().filter(|&&b| !b).count();
    let step = normal.div_ceil(SCATTER_BACKGROUND).max(1);
    let mut seen = 0;
    (0..flags.len())
        .filter(|&i| {
            if flags[i] {
                return true;
            }
            seen += 1;
            (seen - 1) % step == 0
        })
        .collect()
}

pub fn render_reports(dir: &Path, inputs: &ReportInputs, svg: bool) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let out = Out { dir, svg };
    let txns = inputs.txns;
    let amounts: Vec<f64> = txns.iter().map(CleanTransaction::amount).collect();

    let mut sorted = amounts.clone();
    sorted.sort_by(f64::total_cmp);
    let top = quantile_sorted(&sorted, 0.995).unwrap_or(1.0);
    let hi = ((top / 50.0).ceil() * 50.0).max(50.0);
    let h = histogram(&amounts, 0.0, hi, 40);
    out.csv("amount_histogram.csv", &["lower", "upper", "count"], histogram_rows(&h))?;
    out.svg("amount_histogram.svg", || svg::histogram_chart("Transaction amounts", "amount", &h.edges, &h.counts))?;

    let mut categories: BTreeMap<&str, usize> = BTreeMap::new();
    for t in txns {
        *categories.entry(t.category_label.as_str()).or_default() += 1;
    }
    let mut cats: Vec<(&str, usize)> = categories.into_iter().collect();
    cats.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    out.csv("category_counts.csv", &["category", "count"], cats.iter().map(|(c, n)| vec![c.to_string(), n.to_string()]))?;
    out.svg("category_counts.svg", || {
        let labels: Vec<String> = cats.iter().map(|c| c.0.to_string()).collect();
        let values: Vec<f64> = cats.iter().map(|c| c.1 as f64).collect();
        svg::bar_chart("Transactions per category", "count", &labels, &values)
    })?;

    let times: Vec<chrono::DateTime<chrono::Utc>> =
        txns.iter().map(|t| chrono::DateTime::from_timestamp_millis(t.timestamp_ms).expect("timestamp in range")).collect();
    const DAYS: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];
    const MONTHS: [&str; 12] = ["Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"];
    grouped_boxes(&out, "amount_by_hour", "Amount by hour", times.iter().zip(&amounts).map(|(t, &a)| (t.hour(), a)), |h| {
        format!("{h:02}")
    })?;
    grouped_boxes(
        &out,
        "amount_by_weekday",
        "Amount by weekday",
        times.iter().zip(&amounts).map(|(t, &a)| (t.weekday().num_days_from_monday(), a)),
        |d| DAYS[d as usize].to_string(),
    )?;
    grouped_boxes(&out, "amount_by_month", "Amount by month", times.iter().zip(&amounts).map(|(t, &a)| (t.month0(), a)), |m| {
        MONTHS[m as usize].to_string()
    })?;

    let flag_counts: Vec<usize> =
        (0..INDICATOR_NAMES.len()).map(|k| inputs.risk.rows.iter().filter(|r| r.flags.as_array()[k]).count()).collect();
    out.csv(
        "flag_counts.csv",
        &["indicator", "count", "rate"],
        INDICATOR_NAMES.iter().zip(&flag_counts).map(|(n, &c)| vec![n.to_string(), c.to_string(), f(c as f64 / txns.len().max(1) as f64)]),
    )?;
    out.svg("flag_counts.svg", || {
        let labels: Vec<String> = INDICATOR_NAMES.iter().map(|s| s.to_string()).collect();
        let values: Vec<f64> = flag_counts.iter().map(|&c| c as f64).collect();
        svg::bar_chart("Flagged transactions per indicator", "count", &labels, &values)
    })?;

    let composite_counts = {
        let mut c = [0usize; 7];
        for r in &inputs.risk.rows {
            c[usize::from(r.composite).min(6)] += 1;
        }
        c
    };
    out.csv("composite_distribution.csv", &["composite", "count"], composite_counts.iter().enumerate().map(|(k, c)| vec![k.to_string(), c.to_string()]))?;

    for (name, scores, flags) in inputs.detector_scores {
        let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
        let h = histogram(scores, lo, hi, 40);
        out.csv(&format!("{name}_scores.csv"), &["lower", "upper", "count"], histogram_rows(&h))?;
        out.svg(&format!("{name}_scores.svg"), || {
            svg::histogram_chart(&format!("{name} anomaly scores"), "score", &h.edges, &h.counts)
        })?;
        let rows = scatter_rows(flags);
        out.svg(&format!("pca_{name}.svg"), || {
            let pts: Vec<(f64, f64)> = rows.iter().map(|&i| (inputs.projection.get(i, 0), inputs.projection.get(i, 1))).collect();
            let hl: Vec<bool> = rows.iter().map(|&i| flags[i]).collect();
            svg::scatter_chart(&format!("PCA projection, {name} flags"), &pts, &hl)
        })?;
    }
    out.csv(
        "pca_projection.csv",
        &["txn_id", "pc1", "pc2", "kmeans", "dbscan", "if_flag", "ocsvm_flag", "ae_flag"],
        txns.iter().enumerate().map(|(i, t)| {
            let b = |k: usize| u8::from(inputs.detector_scores[k].2[i]).to_string();
            vec![
                t.txn_id.clone(),
                f(inputs.projection.get(i, 0)),
                f(inputs.projection.get(i, 1)),
                inputs.kmeans_labels[i].to_string(),
                inputs.dbscan_labels[i].to_string(),
                b(0),
                b(1),
                b(2),
            ]
        }),
    )?;
    out.svg("pca_dbscan_noise.svg", || {
        let noise: Vec<bool> = inputs.dbscan_labels.iter().map(|&l| l == NOISE).collect();
        let rows = scatter_rows(&noise);
        let pts: Vec<(f64, f64)> = rows.iter().map(|&i| (inputs.projection.get(i, 0), inputs.projection.get(i, 1))).collect();
        let hl: Vec<bool> = rows.iter().map(|&i| noise[i]).collect();
        svg::scatter_chart("PCA projection, DBSCAN noise", &pts, &hl)
    })?;

    out.csv("elbow.csv", &["k", "inertia"], inputs.elbow.iter().map(|(k, v)| vec![k.to_string(), f(*v)]))?;
    out.svg("elbow.svg", || {
        let pts: Vec<(f64, f64)> = inputs.elbow.iter().map(|&(k, v)| (k as f64, v)).collect();
        svg::line_chart("Elbow curve", "k", "inertia", &[Series { name: "inertia", points: &pts }])
    })?;
    out.csv("k_distance.csv", &["rank", "distance"], inputs.k_distance.iter().enumerate().map(|(i, d)| vec![i.to_string(), f(*d)]))?;
    out.svg("k_distance.svg", || {
        let pts: Vec<(f64, f64)> = inputs.k_distance.iter().enumerate().map(|(i, &d)| (i as f64, d)).collect();
        svg::line_chart("Sorted k-distance", "point rank", "distance", &[Series { name: "k-distance", points: &pts }])
    })?;

    for (name, entities) in [("cardholder", inputs.cardholders), ("merchant", inputs.merchants)] {
        let top: Vec<&EntityRisk> = entities.iter().take(10).collect();
        out.svg(&format!("top_{name}s.svg"), || {
            let labels: Vec<String> = top.iter().map(|e| e.entity_id.clone()).collect();
            let values: Vec<f64> = top.iter().map(|e| e.fraud_ratio).collect();
            svg::bar_chart(&format!("Top {name}s by fraud ratio"), "fraud ratio", &labels, &values)
        })?;
    }
    out.svg("window_risk.svg", || {
        let labels: Vec<String> = inputs.windows.iter().map(|w| w.window.name().to_string()).collect();
        let values: Vec<f64> = inputs.windows.iter().map(|w| w.mean_risk).collect();
        svg::bar_chart("Mean composite risk by time window", "mean score", &labels, &values)
    })?;
    out.svg("indicator_correlation.svg", || {
        let labels: Vec<String> = INDICATOR_NAMES.iter().map(|s| s.to_string()).collect();
        let values: Vec<Vec<f64>> = inputs.correlations.iter().map(|r| r.to_vec()).collect();
        svg::heat_table("Indicator correlations", &labels, &values)
    })?;
    out.svg("loss_curve.svg", || {
        let train: Vec<(f64, f64)> = inputs.history.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect();
        let val: Vec<(f64, f64)> = inputs.history.epochs.iter().map(|e| (e.epoch as f64, e.val_loss)).collect();
        svg::line_chart(
            "Autoencoder loss",
            "epoch",
            "mean squared error",
            &[Series { name: "train", points: &train }, Series { name: "validation", points: &val }],
        )
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn histogram_matches_counting_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f64> = (0..5000).map(|_| rng.random_range(-20.0..220.0)).collect();
        let (lo, hi, bins) = (0.0, 200.0, 40);
        let h = histogram(&values, lo, hi, bins);
        for b in 0..bins {
            let (a, z) = (lo + 5.0 * b as f64, lo + 5.0 * (b + 1) as f64);
            let expected = values.iter().filter(|&&v| v >= a && (v < z || (b == bins - 1 && v <= z))).count();
            assert_eq!(h.counts[b], expected, "bin {b}");
        }
        assert_eq!(h.below, values.iter().filter(|&&v| v < lo).count());
        assert_eq!(h.above, values.iter().filter(|&&v| v > hi).count());
        assert_eq!(h.counts.iter().sum::<usize>() + h.below + h.above, values.len());
        assert_eq!(histogram(&[200.0], 0.0, 200.0, 4).counts, vec![0, 0, 0, 1]);
    }

    #[test]
    fn five_number_summary() {
        let b = five_number(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!((b.min, b.q1, b.median, b.q3, b.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert!(five_number(&[]).is_none());
    }

    #[test]
    fn scatter_keeps_every_flag() {
        let flags: Vec<bool> = (0..20_000).map(|i| i % 97 == 0).collect();
        let rows = scatter_rows(&flags);
        assert_eq!(rows.iter().filter(|&&i| flags[i]).count(), flags.iter().filter(|&&b| b).count());
        assert!(rows.len() <= SCATTER_BACKGROUND + 300);
    }
}
