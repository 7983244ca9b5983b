//! Behavioral indicators, composite and weighted risk scores, entity ratios,
//! time-of-day windows, indicator correlations and the review queue.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{CardholderStats, FeatureVector};
use crate::ingest::{format_timestamp, CleanTransaction};
use crate::quantile::quantile;

const DAY_MS: i64 = 86_400_000;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("empty score list")]
    Empty,
    #[error("{what} has {got} rows, expected {expected}")]
    Length { what: &'static str, got: usize, expected: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskThresholds {
    pub unusual_sigma: f64,
    pub rapid_seconds: f64,
    pub spree_daily_count: usize,
    pub sequence_ratio: f64,
    pub high_amount_quantile: f64,
    pub high_risk_quantile: f64,
    pub entity_ratio: f64,
}

impl Default for RiskThresholds {
    fn default() -> Self {
        Self {
            unusual_sigma: 3.0,
            rapid_seconds: 60.0,
            spree_daily_count: 10,
            sequence_ratio: 2.0,
            high_amount_quantile: 0.99,
            high_risk_quantile: 0.95,
            entity_ratio: 0.20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub amount: f64,
    pub unusual_spend: f64,
    pub suspicious_sequence: f64,
    pub rapid_use: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { amount: 0.05, unusual_spend: 0.84, suspicious_sequence: 0.76, rapid_use: 0.53 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HighRiskBasis {
    #[default]
    Composite,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RiskConfig {
    pub thresholds: RiskThresholds,
    pub weights: ScoreWeights,
    pub high_risk_basis: HighRiskBasis,
}

pub const INDICATOR_NAMES: [&str; 8] = [
    "if_flag",
    "ocsvm_flag",
    "ae_flag",
    "unusual_spend",
    "rapid_use",
    "spending_spree",
    "suspicious_sequence",
    "high_amount",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IndicatorFlags {
    pub if_flag: bool,
    pub ocsvm_flag: bool,
    pub ae_flag: bool,
    pub unusual_spend: bool,
    pub rapid_use: bool,
    pub spending_spree: bool,
    pub suspicious_sequence: bool,
    pub high_amount: bool,
}

impl IndicatorFlags {
    /// Flags in `INDICATOR_NAMES` order.
    pub fn as_array(&self) -> [bool; 8] {
        [
            self.if_flag,
            self.ocsvm_flag,
            self.ae_flag,
            self.unusual_spend,
            self.rapid_use,
            self.spending_spree,
            self.suspicious_sequence,
            self.high_amount,
        ]
    }

    pub fn from_array(a: [bool; 8]) -> Self {
        Self {
            if_flag: a[0],
            ocsvm_flag: a[1],
            ae_flag: a[2],
            unusual_spend: a[3],
            rapid_use: a[4],
            spending_spree: a[5],
            suspicious_sequence: a[6],
            high_amount: a[7],
        }
    }
}

pub fn unusual_spend(amount: f64, stats: &CardholderStats, sigmas: f64) -> bool {
    stats.std_amount > 0.0 && (amount - stats.mean_amount).abs() > sigmas * stats.std_amount
}

pub fn rapid_use(features: &FeatureVector, limit_secs: f64) -> bool {
    !features.is_first_use() && features.seconds_since_last < limit_secs
}

pub fn suspicious_sequence(prior_amount: Option<f64>, amount: f64, ratio: f64) -> bool {
    match prior_amount {
        Some(p) if p > 0.0 => (amount - p).abs() / p > ratio,
        _ => false,
    }
}

/// Count of rows per (card, UTC day), aligned with `txns`.
pub fn card_day_counts(txns: &[CleanTransaction]) -> Vec<usize> {
    let mut counts: BTreeMap<(&str, i64), usize> = BTreeMap::new();
    for t in txns {
        *counts.entry((&t.card_id, t.timestamp_ms.div_euclid(DAY_MS))).or_default() += 1;
    }
    txns.iter().map(|t| counts[&(t.card_id.as_str(), t.timestamp_ms.div_euclid(DAY_MS))]).collect()
}

/// Behavioral flags for a card-sorted corpus. Detector flags stay false.
/// Returns the flags and the high-amount cut-off.
pub fn behavioral_flags(
    txns: &[CleanTransaction],
    features: &[FeatureVector],
    stats: &BTreeMap<String, CardholderStats>,
    thresholds: &RiskThresholds,
) -> Result<(Vec<IndicatorFlags>, f64), RiskError> {
    if features.len() != txns.len() {
        return Err(RiskError::Length { what: "features", got: features.len(), expected: txns.len() });
    }
    let amounts: Vec<f64> = txns.iter().map(CleanTransaction::amount).collect();
    let high_cut = quantile(&amounts, thresholds.high_amount_quantile).ok_or(RiskError::Empty)?;
    let day_counts = card_day_counts(txns);
    let flags = txns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let prior = (i > 0 && txns[i - 1].card_id == t.card_id).then(|| amounts[i - 1]);
            IndicatorFlags {
                unusual_spend: stats.get(&t.card_id).is_some_and(|s| unusual_spend(amounts[i], s, thresholds.unusual_sigma)),
                rapid_use: rapid_use(&features[i], thresholds.rapid_seconds),
                spending_spree: day_counts[i] >= thresholds.spree_daily_count,
                suspicious_sequence: suspicious_sequence(prior, amounts[i], thresholds.sequence_ratio),
                high_amount: amounts[i] > high_cut,
                ..Default::default()
            }
        })
        .collect();
    Ok((flags, high_cut))
}

pub fn merge_detector_flags(
    flags: &mut [IndicatorFlags],
    iforest: &[bool],
    ocsvm: &[bool],
    autoencoder: &[bool],
) -> Result<(), RiskError> {
    for (what, v) in [("iforest flags", iforest), ("ocsvm flags", ocsvm), ("autoencoder flags", autoencoder)] {
        if v.len() != flags.len() {
            return Err(RiskError::Length { what, got: v.len(), expected: flags.len() });
        }
    }
    for (i, f) in flags.iter_mut().enumerate() {
        f.if_flag = iforest[i];
        f.ocsvm_flag = ocsvm[i];
        f.ae_flag = autoencoder[i];
    }
    Ok(())
}

pub fn composite_score(f: &IndicatorFlags) -> u8 {
    [f.if_flag, f.ocsvm_flag, f.ae_flag, f.unusual_spend, f.rapid_use, f.spending_spree]
        .iter()
        .map(|&b| u8::from(b))
        .sum()
}

pub fn weighted_score(f: &IndicatorFlags, amount_norm: f64, w: &ScoreWeights) -> f64 {
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    w.amount * amount_norm
        + w.unusual_spend * on(f.unusual_spend)
        + w.suspicious_sequence * on(f.suspicious_sequence)
        + w.rapid_use * on(f.rapid_use)
}

pub fn amount_norm(amount: f64, high_cut: f64) -> f64 {
    if high_cut > 0.0 {
        (amount / high_cut).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Rows strictly above the nearest-rank `q` quantile.
pub fn high_risk_mark(scores: &[f64], q: f64) -> Result<Vec<bool>, RiskError> {
    let cut = quantile(scores, q).ok_or(RiskError::Empty)?;
    Ok(scores.iter().map(|&s| s > cut).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub txn_id: String,
    pub card_id: String,
    pub merchant_id: String,
    pub timestamp_ms: i64,
    pub amount: f64,
    pub flags: IndicatorFlags,
    pub composite: u8,
    pub weighted: f64,
    pub high_risk: bool,
}

impl RiskRow {
    /// Review-queue predicate.
    pub fn needs_review(&self) -> bool {
        self.high_risk || self.flags.high_amount || self.flags.suspicious_sequence || self.flags.rapid_use
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    pub rows: Vec<RiskRow>,
    pub high_amount_threshold: f64,
}

pub fn score_corpus(
    txns: &[CleanTransaction],
    flags: &[IndicatorFlags],
    high_amount_threshold: f64,
    config: &RiskConfig,
) -> Result<RiskTable, RiskError> {
    if flags.len() != txns.len() {
        return Err(RiskError::Length { what: "flags", got: flags.len(), expected: txns.len() });
    }
    let composite: Vec<u8> = flags.iter().map(composite_score).collect();
    let weighted: Vec<f64> = txns
        .iter()
        .zip(flags)
        .map(|(t, f)| weighted_score(f, amount_norm(t.amount(), high_amount_threshold), &config.weights))
        .collect();
    let basis: Vec<f64> = match config.high_risk_basis {
        HighRiskBasis::Composite => composite.iter().map(|&c| f64::from(c)).collect(),
        HighRiskBasis::Weighted => weighted.clone(),
    };
    let high = high_risk_mark(&basis, config.thresholds.high_risk_quantile)?;
    let rows = txns
        .iter()
        .enumerate()
        .map(|(i, t)| RiskRow {
            txn_id: t.txn_id.clone(),
            card_id: t.card_id.clone(),
            merchant_id: t.merchant_id.clone(),
            timestamp_ms: t.timestamp_ms,
            amount: t.amount(),
            flags: flags[i],
            composite: composite[i],
            weighted: weighted[i],
            high_risk: high[i],
        })
        .collect();
    Ok(RiskTable { rows, high_amount_threshold })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Cardholder,
    Merchant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRisk {
    pub entity_id: String,
    pub txn_count: usize,
    pub flagged_count: usize,
    pub fraud_ratio: f64,
    pub high_risk: bool,
}

/// Ranked by ratio (descending), then transaction count (descending), then id.
pub fn entity_fraud_ratio(ids: &[&str], flagged: &[bool], high_risk_ratio: f64) -> Vec<EntityRisk> {
    let mut acc: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (id, &f) in ids.iter().zip(flagged) {
        let e = acc.entry(id).or_default();
        e.0 += 1;
        e.1 += usize::from(f);
    }
    let mut out: Vec<EntityRisk> = acc
        .into_iter()
        .map(|(id, (n, f))| {
            let ratio = f as f64 / n as f64;
            EntityRisk {
                entity_id: id.to_string(),
                txn_count: n,
                flagged_count: f,
                fraud_ratio: ratio,
                high_risk: ratio > high_risk_ratio,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.fraud_ratio
            .total_cmp(&a.fraud_ratio)
            .then(b.txn_count.cmp(&a.txn_count))
            .then(a.entity_id.cmp(&b.entity_id))
    });
    out
}

/// A row counts as flagged when its composite score is at least 1.
pub fn entity_risk(table: &RiskTable, group_by: GroupBy, high_risk_ratio: f64) -> Vec<EntityRisk> {
    let ids: Vec<&str> = table
        .rows
        .iter()
        .map(|r| match group_by {
            GroupBy::Cardholder => r.card_id.as_str(),
            GroupBy::Merchant => r.merchant_id.as_str(),
        })
        .collect();
    let flagged: Vec<bool> = table.rows.iter().map(|r| r.composite >= 1).collect();
    entity_fraud_ratio(&ids, &flagged, high_risk_ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimeWindow {
    Night,
    Morning,
    Afternoon,
    Evening,
}

impl TimeWindow {
    pub const ALL: [TimeWindow; 4] = [TimeWindow::Night, TimeWindow::Morning, TimeWindow::Afternoon, TimeWindow::Evening];

    /// `[0,6)`, `[6,12)`, `[12,18)`, `[18,24)` in UTC hours.
    pub fn of_hour(hour: u32) -> Self {
        match hour {
            0..=5 => TimeWindow::Night,
            6..=11 => TimeWindow::Morning,
            12..=17 => TimeWindow::Afternoon,
            _ => TimeWindow::Evening,
        }
    }

    pub fn of_timestamp(ms: i64) -> Self {
        Self::of_hour((ms.rem_euclid(DAY_MS) / 3_600_000) as u32)
    }

    pub fn name(self) -> &'static str {
        match self {
            TimeWindow::Night => "night",
            TimeWindow::Morning => "morning",
            TimeWindow::Afternoon => "afternoon",
            TimeWindow::Evening => "evening",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeWindowStats {
    pub window: TimeWindow,
    pub txn_count: usize,
    /// Zero for an empty window.
    pub mean_risk: f64,
}

pub fn time_window_risk(timestamps_ms: &[i64], scores: &[f64]) -> Vec<TimeWindowStats> {
    let mut acc = [(0usize, 0.0f64); 4];
    for (&ts, &s) in timestamps_ms.iter().zip(scores) {
        let w = TimeWindow::of_timestamp(ts) as usize;
        acc[w].0 += 1;
        acc[w].1 += s;
    }
    TimeWindow::ALL
        .iter()
        .zip(acc)
        .map(|(&window, (n, sum))| TimeWindowStats {
            window,
            txn_count: n,
            mean_risk: if n > 0 { sum / n as f64 } else { 0.0 },
        })
        .collect()
}

/// Pearson correlation between 0/1 columns; NaN where a column is constant.
pub fn indicator_correlations(flags: &[[bool; 8]]) -> [[f64; 8]; 8] {
    let n = flags.len() as f64;
    let mut count = [0.0f64; 8];
    let mut joint = [[0.0f64; 8]; 8];
    for row in flags {
        for i in 0..8 {
            if row[i] {
                count[i] += 1.0;
                for j in 0..8 {
                    if row[j] {
                        joint[i][j] += 1.0;
                    }
                }
            }
        }
    }
    let mut out = [[f64::NAN; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            let (pi, pj) = (count[i] / n, count[j] / n);
            let vi = pi * (1.0 - pi);
            let vj = pj * (1.0 - pj);
            if vi > 0.0 && vj > 0.0 {
                out[i][j] = if i == j { 1.0 } else { (joint[i][j] / n - pi * pj) / (vi * vj).sqrt() };
            }
        }
    }
    out
}

/// Indices of rows needing review, highest weighted score first (ties by row order).
pub fn review_queue(table: &RiskTable) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..table.rows.len()).filter(|&i| table.rows[i].needs_review()).collect();
    idx.sort_by(|&a, &b| table.rows[b].weighted.total_cmp(&table.rows[a].weighted).then(a.cmp(&b)));
    idx
}

pub fn queue_fraction(table: &RiskTable) -> f64 {
    if table.rows.is_empty() {
        return 0.0;
    }
    table.rows.iter().filter(|r| r.needs_review()).count() as f64 / table.rows.len() as f64
}

pub fn write_risk_csv<W: Write>(w: W, table: &RiskTable) -> Result<(), RiskError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["txn_id", "card_id", "merchant_id", "timestamp", "amount"];
    header.extend(INDICATOR_NAMES);
    header.extend(["composite", "weighted", "high_risk", "review"]);
    out.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![
            r.txn_id.clone(),
            r.card_id.clone(),
            r.merchant_id.clone(),
            format_timestamp(r.timestamp_ms),
            format!("{:.2}", r.amount),
        ];
        rec.extend(r.flags.as_array().iter().map(|&b| u8::from(b).to_string()));
        rec.push(r.composite.to_string());
        rec.push(r.weighted.to_string());
        rec.push(u8::from(r.high_risk).to_string());
        rec.push(u8::from(r.needs_review()).to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_entity_csv<W: Write>(w: W, entities: &[EntityRisk]) -> Result<(), RiskError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["rank", "entity_id", "txn_count", "flagged_count", "fraud_ratio", "high_risk"])?;
    for (rank, e) in entities.iter().enumerate() {
        out.write_record([
            (rank + 1).to_string(),
            e.entity_id.clone(),
            e.txn_count.to_string(),
            e.flagged_count.to_string(),
            e.fraud_ratio.to_string(),
            u8::from(e.high_risk).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_window_csv<W: Write>(w: W, stats: &[TimeWindowStats]) -> Result<(), RiskError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["window", "txn_count", "mean_risk"])?;
    for s in stats {
        out.write_record([s.window.name().to_string(), s.txn_count.to_string(), s.mean_risk.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_correlation_csv<W: Write>(w: W, corr: &[[f64; 8]; 8]) -> Result<(), RiskError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![""];
    header.extend(INDICATOR_NAMES);
    out.write_record(&header)?;
    for (name, row) in INDICATOR_NAMES.iter().zip(corr) {
        let mut rec = vec![name.to_string()];
        rec.extend(row.iter().map(|v| if v.is_nan() { "NaN".to_string() } else { v.to_string() }));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
