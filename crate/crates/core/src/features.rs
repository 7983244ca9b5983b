//! Behavioural, temporal and frequency features, and the standardized
//! four-column model matrix.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{format_timestamp, parse_timestamp, CleanTransaction};
use crate::matrix::Matrix;

/// Interval assigned to a card's first transaction: 9999 minutes.
pub const FIRST_USE_SENTINEL_SECS: f64 = 599_940.0;
pub const STD_FLOOR: f64 = 1e-12;
pub const MODEL_COLUMNS: [&str; 4] = ["amount", "amount_deviation", "seconds_since_last", "category_frequency"];

const DAY_MS: i64 = 86_400_000;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("transactions not sorted by (card_id, timestamp) at row {0}")]
    Unsorted(usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("feature table {path}: {reason}")]
    Table { path: String, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardholderStats {
    pub card_id: String,
    pub mean_amount: f64,
    /// Population standard deviation.
    pub std_amount: f64,
    pub txn_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub amount: f64,
    pub amount_deviation: f64,
    pub seconds_since_last: f64,
    pub category_frequency: f64,
    pub hour: u32,
    pub day_of_week: u32,
    pub weekend: bool,
    pub month: u32,
    pub rolling_count_7d: usize,
    pub rolling_sum_7d: f64,
    pub rolling_count_30d: usize,
    pub rolling_sum_30d: f64,
}

impl FeatureVector {
    pub fn model_row(&self) -> [f64; 4] {
        [self.amount, self.amount_deviation, self.seconds_since_last, self.category_frequency]
    }

    pub fn is_first_use(&self) -> bool {
        self.seconds_since_last == FIRST_USE_SENTINEL_SECS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Behavioral {
    pub amount_deviation: f64,
    pub seconds_since_last: f64,
    pub rolling_count_7d: usize,
    pub rolling_sum_7d: f64,
    pub rolling_count_30d: usize,
    pub rolling_sum_30d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Temporal {
    pub hour: u32,
    /// Monday = 0.
    pub day_of_week: u32,
    pub weekend: bool,
    pub month: u32,
}

/// Per-column z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub std_floor: f64,
}

impl StandardizationParams {
    pub fn fit(raw: &Matrix) -> Self {
        let n = raw.rows();
        let mut mean = Vec::with_capacity(raw.cols());
        let mut std = Vec::with_capacity(raw.cols());
        for j in 0..raw.cols() {
            let col = raw.column(j);
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            if n == 0 || lo == hi {
                // Constant column: pin the mean to the value so it centres to exactly zero.
                mean.push(if n == 0 { 0.0 } else { lo });
                std.push(0.0);
                continue;
            }
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            mean.push(m);
            std.push(var.sqrt());
        }
        Self { mean, std, std_floor: STD_FLOOR }
    }

    fn divisor(&self, j: usize) -> f64 {
        self.std[j].max(self.std_floor)
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, x)| (x - self.mean[j]) / self.divisor(j)).collect()
    }

    pub fn transform(&self, raw: &Matrix) -> Matrix {
        let mut out = raw.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.divisor(j);
            }
        }
        out
    }

    pub fn inverse_transform(&self, z: &Matrix) -> Matrix {
        let mut out = z.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.divisor(j) + self.mean[j];
            }
        }
        out
    }
}

/// Standardized model input plus the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub data: Matrix,
    pub params: StandardizationParams,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.data.rows()
    }
}

/// Per-card population mean and standard deviation of amounts.
pub fn cardholder_stats(txns: &[CleanTransaction]) -> BTreeMap<String, CardholderStats> {
    // Exact integer moments over cents, so equal amounts give sigma = 0 exactly.
    let mut acc: BTreeMap<&str, (i128, i128, usize)> = BTreeMap::new();
    for t in txns {
        let e = acc.entry(&t.card_id).or_insert((0, 0, 0));
        let a = t.amount_cents as i128;
        e.0 += a;
        e.1 += a * a;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(card, (sum, sum_sq, n))| {
            let n_i = n as i128;
            let var_num = n_i * sum_sq - sum * sum;
            let stats = CardholderStats {
                card_id: card.to_string(),
                mean_amount: sum as f64 / n as f64 / 100.0,
                std_amount: (var_num as f64).sqrt() / n as f64 / 100.0,
                txn_count: n,
            };
            (card.to_string(), stats)
        })
        .collect()
}

fn check_sorted(txns: &[CleanTransaction]) -> Result<(), FeatureError> {
    for (i, w) in txns.windows(2).enumerate() {
        let ordered = (w[0].card_id.as_str(), w[0].timestamp_ms) <= (w[1].card_id.as_str(), w[1].timestamp_ms);
        if !ordered {
            return Err(FeatureError::Unsorted(i + 1));
        }
    }
    Ok(())
}

/// Amount deviation, inter-arrival time and strictly-prior rolling windows.
///
/// Suspect-timestamp rows never contribute an interval (the sentinel is used
/// for them and for the row after them) and are left out of every window.
pub fn derive_behavioral(
    txns: &[CleanTransaction],
    stats: &BTreeMap<String, CardholderStats>,
) -> Result<Vec<Behavioral>, FeatureError> {
    check_sorted(txns)?;
    let mut out = Vec::with_capacity(txns.len());
    let mut start = 0;
    while start < txns.len() {
        let card = &txns[start].card_id;
        let end = start + txns[start..].iter().take_while(|t| &t.card_id == card).count();
        let rows = &txns[start..end];
        let mean = stats.get(card.as_str()).map_or(0.0, |s| s.mean_amount);

        // Prefix count/sum over usable (non-suspect) rows.
        let mut pre_count = vec![0usize; rows.len() + 1];
        let mut pre_sum = vec![0i64; rows.len() + 1];
        for (k, t) in rows.iter().enumerate() {
            let usable = !t.timestamp_suspect;
            pre_count[k + 1] = pre_count[k] + usable as usize;
            pre_sum[k + 1] = pre_sum[k] + if usable { t.amount_cents } else { 0 };
        }
        let window = |k: usize, days: i64| {
            let from = rows[k].timestamp_ms - days * DAY_MS;
            let lo = rows[..k].partition_point(|t| t.timestamp_ms < from);
            (pre_count[k] - pre_count[lo], (pre_sum[k] - pre_sum[lo]) as f64 / 100.0)
        };

        for (k, t) in rows.iter().enumerate() {
            let seconds_since_last = if k == 0 || t.timestamp_suspect || rows[k - 1].timestamp_suspect {
                FIRST_USE_SENTINEL_SECS
            } else {
                (t.timestamp_ms - rows[k - 1].timestamp_ms) as f64 / 1000.0
            };
            let (c7, s7) = window(k, 7);
            let (c30, s30) = window(k, 30);
            out.push(Behavioral {
                amount_deviation: t.amount() - mean,
                seconds_since_last,
                rolling_count_7d: c7,
                rolling_sum_7d: s7,
                rolling_count_30d: c30,
                rolling_sum_30d: s30,
            });
        }
        start = end;
    }
    Ok(out)
}

pub fn derive_temporal(timestamp_ms: i64) -> Temporal {
    let t = DateTime::<Utc>::from_timestamp_millis(timestamp_ms).expect("timestamp in chrono range");
    let day_of_week = t.weekday().num_days_from_monday();
    Temporal { hour: t.hour(), day_of_week, weekend: day_of_week >= 5, month: t.month() }
}

/// Share of corpus rows falling in each category.
pub fn category_frequency(txns: &[CleanTransaction]) -> Result<BTreeMap<String, f64>, FeatureError> {
    if txns.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in txns {
        *counts.entry(t.category_label.clone()).or_default() += 1;
    }
    let n = txns.len() as f64;
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect())
}

/// Every engineered feature for every row, aligned with `txns`.
pub fn build_features(
    txns: &[CleanTransaction],
    stats: &BTreeMap<String, CardholderStats>,
) -> Result<Vec<FeatureVector>, FeatureError> {
    let behavioral = derive_behavioral(txns, stats)?;
    let freq = category_frequency(txns)?;
    Ok(txns
        .iter()
        .zip(behavioral)
        .map(|(t, b)| {
            let tm = derive_temporal(t.timestamp_ms);
            FeatureVector {
                amount: t.amount(),
                amount_deviation: b.amount_deviation,
                seconds_since_last: b.seconds_since_last,
                category_frequency: freq[&t.category_label],
                hour: tm.hour,
                day_of_week: tm.day_of_week,
                weekend: tm.weekend,
                month: tm.month,
                rolling_count_7d: b.rolling_count_7d,
                rolling_sum_7d: b.rolling_sum_7d,
                rolling_count_30d: b.rolling_count_30d,
                rolling_sum_30d: b.rolling_sum_30d,
            }
        })
        .collect())
}

pub fn raw_model_matrix(features: &[FeatureVector]) -> Matrix {
    let rows: Vec<[f64; 4]> = features.iter().map(FeatureVector::model_row).collect();
    Matrix::from_rows(&rows)
}

/// Z-scores every column of `raw`.
pub fn build_matrix(raw: &Matrix) -> FeatureMatrix {
    let params = StandardizationParams::fit(raw);
    FeatureMatrix { data: params.transform(raw), params }
}

const FEATURE_HEADER: [&str; 20] = [
    "txn_id",
    "card_id",
    "timestamp",
    "category_label",
    "amount",
    "amount_deviation",
    "seconds_since_last",
    "category_frequency",
    "hour",
    "day_of_week",
    "weekend",
    "month",
    "rolling_count_7d",
    "rolling_sum_7d",
    "rolling_count_30d",
    "rolling_sum_30d",
    "z_amount",
    "z_amount_deviation",
    "z_seconds_since_last",
    "z_category_frequency",
];

/// Writes raw and standardized columns side by side, in `FEATURE_HEADER` order.
pub fn write_feature_csv(
    path: &Path,
    txns: &[CleanTransaction],
    features: &[FeatureVector],
    matrix: &FeatureMatrix,
) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(FEATURE_HEADER)?;
    for (i, (t, f)) in txns.iter().zip(features).enumerate() {
        let z = matrix.data.row(i);
        w.write_record([
            t.txn_id.clone(),
            t.card_id.clone(),
            format_timestamp(t.timestamp_ms),
            t.category_label.clone(),
            f.amount.to_string(),
            f.amount_deviation.to_string(),
            f.seconds_since_last.to_string(),
            f.category_frequency.to_string(),
            f.hour.to_string(),
            f.day_of_week.to_string(),
            (f.weekend as u8).to_string(),
            f.month.to_string(),
            f.rolling_count_7d.to_string(),
            f.rolling_sum_7d.to_string(),
            f.rolling_count_30d.to_string(),
            f.rolling_sum_30d.to_string(),
            z[0].to_string(),
            z[1].to_string(),
            z[2].to_string(),
            z[3].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Row of a feature table as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub txn_id: String,
    pub card_id: String,
    pub timestamp_ms: i64,
    pub category_label: String,
    pub features: FeatureVector,
    pub standardized: [f64; 4],
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureRecord>, FeatureError> {
    let err = |reason: String| FeatureError::Table { path: path.display().to_string(), reason };
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(FEATURE_HEADER) {
        return Err(err("unexpected header".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let r = rec?;
        let line = r.position().map_or(0, |p| p.line());
        let f = |i: usize| r[i].parse::<f64>().map_err(|_| err(format!("line {line}: column {}", FEATURE_HEADER[i])));
        let u = |i: usize| r[i].parse::<usize>().map_err(|_| err(format!("line {line}: column {}", FEATURE_HEADER[i])));
        out.push(FeatureRecord {
            txn_id: r[0].to_string(),
            card_id: r[1].to_string(),
            timestamp_ms: parse_timestamp(&r[2]).ok_or_else(|| err(format!("line {line}: timestamp")))?,
            category_label: r[3].to_string(),
            features: FeatureVector {
                amount: f(4)?,
                amount_deviation: f(5)?,
                seconds_since_last: f(6)?,
                category_frequency: f(7)?,
                hour: u(8)? as u32,
                day_of_week: u(9)? as u32,
                weekend: &r[10] == "1",
                month: u(11)? as u32,
                rolling_count_7d: u(12)?,
                rolling_sum_7d: f(13)?,
                rolling_count_30d: u(14)?,
                rolling_sum_30d: f(15)?,
            },
            standardized: [f(16)?, f(17)?, f(18)?, f(19)?],
        });
    }
    Ok(out)
}
