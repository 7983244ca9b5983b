//! Seeded synthetic card-transaction corpus with planted, labelled fraud.
//!
//! Cards belong to behavioural segments, each with its own merchant
//! categories, purchase cadence and spending level. Arrivals per card follow
//! a gamma renewal process in "operational time" that is warped onto the
//! calendar so weekends and December are busier; the hour of day follows an
//! evening-heavy profile. Amounts are log-normal around a per-card median.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    format_amount, format_timestamp, Cardholder, Category, CleanTransaction, Merchant, RawTables, RawTransaction,
    TablePaths,
};
use crate::quantile::quantile;

const DAY_MS: i64 = 86_400_000;
const HOUR_MS: i64 = 3_600_000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("corpus too small: {planted} planted rows, need at least {need}")]
    TooSmall { planted: usize, need: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("labels file line {line}: {reason}")]
    Labels { line: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Typology {
    HighAmountBurst,
    RapidUseRun,
    LateNightHighValue,
    CategoryOutlier,
    Spree,
    None,
}

impl Typology {
    pub const PLANTED: [Typology; 5] = [
        Typology::HighAmountBurst,
        Typology::RapidUseRun,
        Typology::LateNightHighValue,
        Typology::CategoryOutlier,
        Typology::Spree,
    ];

    /// Typologies defined by a behavioural threshold.
    pub const THRESHOLD_DEFINED: [Typology; 3] = [Typology::HighAmountBurst, Typology::RapidUseRun, Typology::Spree];

    pub fn as_str(self) -> &'static str {
        match self {
            Typology::HighAmountBurst => "high_amount_burst",
            Typology::RapidUseRun => "rapid_use_run",
            Typology::LateNightHighValue => "late_night_high_value",
            Typology::CategoryOutlier => "category_outlier",
            Typology::Spree => "spree",
            Typology::None => "none",
        }
    }
}

impl fmt::Display for Typology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Typology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Typology::PLANTED
            .into_iter()
            .chain([Typology::None])
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown typology {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub categories: Vec<String>,
    pub mean_gap_days: f64,
    pub amount_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmountModel {
    /// Log-scale spread of card medians around the segment median.
    pub card_sigma: f64,
    /// Log-scale spread of single purchases around the card median.
    pub txn_sigma: f64,
    /// Shape of the gamma inter-arrival distribution (higher is more regular).
    pub gap_shape: f64,
}

impl Default for AmountModel {
    fn default() -> Self {
        Self { card_sigma: 0.35, txn_sigma: 0.3, gap_shape: 32.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalModel {
    pub start_date: String,
    pub span_days: u32,
    pub hourly_weights: Vec<f64>,
    pub weekend_factor: f64,
    pub december_factor: f64,
}

impl Default for TemporalModel {
    fn default() -> Self {
        Self {
            start_date: "2024-01-01".into(),
            span_days: 365,
            hourly_weights: vec![
                0.35, 0.25, 0.15, 0.10, 0.10, 0.15, 0.30, 0.50, 0.70, 0.80, 0.90, 1.00, 1.20, 1.10, 1.00, 1.00,
                1.10, 1.30, 1.60, 1.90, 2.40, 2.60, 2.50, 2.20,
            ],
            weekend_factor: 1.3,
            december_factor: 1.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TypologyParams {
    pub burst_multiplier: (f64, f64),
    /// Minimum normal rows on a card chosen for a high-amount burst.
    pub burst_min_card_rows: usize,
    pub rapid_amount: (f64, f64),
    pub rapid_gap_secs: (f64, f64),
    pub rapid_run_len: usize,
    pub late_amount: (f64, f64),
    pub late_end_hour: u32,
    pub outlier_multiplier: (f64, f64),
    pub outlier_categories: Vec<String>,
    pub spree_amount: (f64, f64),
    pub spree_gap_secs: (f64, f64),
    pub spree_run_len: usize,
    pub spree_start_hour: u32,
}

impl Default for TypologyParams {
    fn default() -> Self {
        Self {
            burst_multiplier: (8.0, 15.0),
            burst_min_card_rows: 30,
            rapid_amount: (200.0, 700.0),
            rapid_gap_secs: (5.0, 55.0),
            rapid_run_len: 3,
            late_amount: (500.0, 1000.0),
            late_end_hour: 5,
            outlier_multiplier: (5.0, 10.0),
            outlier_categories: vec!["jewelry".into(), "electronics".into()],
            spree_amount: (200.0, 700.0),
            spree_gap_secs: (1200.0, 4800.0),
            spree_run_len: 10,
            spree_start_hour: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_transactions: usize,
    /// Total cards; `None` derives the count from each segment's cadence.
    pub n_cards: Option<usize>,
    pub n_merchants: usize,
    pub anomaly_rate: f64,
    pub seed: u64,
    pub category_mix: BTreeMap<String, f64>,
    pub segments: Vec<Segment>,
    pub regions: BTreeMap<String, f64>,
    pub amount: AmountModel,
    pub temporal: TemporalModel,
    pub typologies: TypologyParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        let mix = [
            ("pub", 0.25),
            ("food truck", 0.20),
            ("restaurant", 0.18),
            ("bar", 0.14),
            ("coffee shop", 0.10),
            ("retail", 0.13),
        ];
        let segment = |cats: &[&str], gap: f64, median: f64| Segment {
            categories: cats.iter().map(|c| c.to_string()).collect(),
            mean_gap_days: gap,
            amount_median: median,
        };
        Self {
            n_transactions: 50_000,
            n_cards: None,
            n_merchants: 300,
            anomaly_rate: 0.015,
            seed: 42,
            category_mix: mix.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            segments: vec![
                segment(&["pub"], 1.0, 40.0),
                segment(&["food truck", "restaurant"], 3.0, 52.0),
                segment(&["bar", "retail", "coffee shop"], 7.0, 63.0),
            ],
            regions: [("metro", 0.5), ("tier2", 0.3), ("rural", 0.2)].iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            amount: AmountModel::default(),
            temporal: TemporalModel::default(),
            typologies: TypologyParams::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_transactions == 0 {
            return bad("n_transactions must be positive".into());
        }
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate < 0.1) {
            return bad(format!("anomaly_rate {} outside (0, 0.1)", self.anomaly_rate));
        }
        let total: f64 = self.category_mix.values().sum();
        if (total - 1.0).abs() > 1e-9 || self.category_mix.values().any(|&p| p < 0.0) {
            return bad(format!("category probabilities sum to {total}, expected 1"));
        }
        let mut covered = BTreeSet::new();
        for s in &self.segments {
            if !(s.mean_gap_days > 0.0 && s.amount_median > 0.0) || s.categories.is_empty() {
                return bad("segments need categories, a positive gap and a positive median".into());
            }
            for c in &s.categories {
                if !self.category_mix.contains_key(c) {
                    return bad(format!("segment category {c:?} missing from category_mix"));
                }
                if !covered.insert(c.clone()) {
                    return bad(format!("category {c:?} appears in two segments"));
                }
            }
        }
        if covered.len() != self.category_mix.len() {
            return bad("every category must belong to a segment".into());
        }
        if self.regions.is_empty() || self.regions.values().any(|&p| p < 0.0) || self.regions.values().sum::<f64>() <= 0.0 {
            return bad("regions need non-negative shares with a positive total".into());
        }
        let t = &self.temporal;
        if t.hourly_weights.len() != 24 || t.hourly_weights.iter().any(|&w| w < 0.0) || t.hourly_weights.iter().sum::<f64>() <= 0.0 {
            return bad("hourly_weights must be 24 non-negative values".into());
        }
        if t.span_days == 0 || !(t.weekend_factor > 0.0 && t.december_factor > 0.0) {
            return bad("span and seasonal factors must be positive".into());
        }
        self.start_ms()?;
        let p = &self.typologies;
        if p.rapid_run_len == 0 || p.spree_run_len == 0 || p.late_end_hour == 0 || p.late_end_hour > 24 {
            return bad("typology run lengths and late_end_hour must be positive".into());
        }
        if p.rapid_gap_secs.1 >= 60.0 || p.rapid_gap_secs.0 <= 0.0 {
            return bad("rapid gaps must lie in (0, 60) seconds".into());
        }
        let spree_span = p.spree_start_hour as f64 * 3600.0 + p.spree_run_len as f64 * p.spree_gap_secs.1;
        if spree_span >= 86_400.0 {
            return bad("spree run does not fit in one day".into());
        }
        if p.outlier_categories.is_empty() || p.outlier_categories.iter().any(|c| self.category_mix.contains_key(c)) {
            return bad("outlier categories must be new labels".into());
        }
        if self.amount.card_sigma < 0.0 || self.amount.txn_sigma < 0.0 || self.amount.gap_shape <= 0.0 {
            return bad("amount model spreads must be non-negative".into());
        }
        Ok(())
    }

    pub fn start_ms(&self) -> Result<i64, SynthError> {
        NaiveDate::parse_from_str(&self.temporal.start_date, "%Y-%m-%d")
            .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp_millis())
            .map_err(|e| SynthError::Config(format!("start_date: {e}")))
    }

    pub fn end_ms(&self) -> Result<i64, SynthError> {
        Ok(self.start_ms()? + self.temporal.span_days as i64 * DAY_MS)
    }

    pub fn planted_count(&self) -> usize {
        (self.anomaly_rate * self.n_transactions as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTransaction {
    pub txn: CleanTransaction,
    pub is_fraud: bool,
    pub typology: Typology,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub cardholders: Vec<Cardholder>,
    pub merchants: Vec<Merchant>,
    pub categories: Vec<Category>,
    /// Ordered by timestamp; `seq` is the row position.
    pub rows: Vec<LabeledTransaction>,
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn weighted_pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [(T, f64)]) -> &'a T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut x = rng.random_range(0.0..total);
    for (item, w) in items {
        if x < *w {
            return item;
        }
        x -= w;
    }
    &items.last().expect("non-empty choices").0
}

fn cents(amount: f64) -> i64 {
    ((amount * 100.0).round() as i64).max(1)
}

/// Maps operational days onto calendar days weighted by weekday and month.
struct CalendarWarp {
    /// Cumulative weight at the start of each day, scaled to `span_days`.
    cumulative: Vec<f64>,
}

impl CalendarWarp {
    fn new(start_ms: i64, t: &TemporalModel) -> Self {
        let start = chrono::DateTime::from_timestamp_millis(start_ms).expect("valid start").date_naive();
        let weights: Vec<f64> = (0..t.span_days)
            .map(|d| {
                let day = start + chrono::Days::new(d as u64);
                let weekend = day.weekday().num_days_from_monday() >= 5;
                (if weekend { t.weekend_factor } else { 1.0 }) * (if day.month() == 12 { t.december_factor } else { 1.0 })
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let scale = t.span_days as f64 / total;
        let mut cumulative = Vec::with_capacity(weights.len() + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in weights {
            acc += w * scale;
            cumulative.push(acc);
        }
        Self { cumulative }
    }

    fn day_of(&self, u: f64) -> i64 {
        let days = self.cumulative.len() - 1;
        (self.cumulative.partition_point(|&c| c <= u).saturating_sub(1)).min(days - 1) as i64
    }
}

struct Builder {
    merchants_by_category: BTreeMap<String, Vec<String>>,
    hours: Vec<(i64, f64)>,
}

impl Builder {
    fn time_in_day(&self, rng: &mut ChaCha8Rng, day_start_ms: i64) -> i64 {
        let hour = *weighted_pick(rng, &self.hours);
        day_start_ms + hour * HOUR_MS + rng.random_range(0..HOUR_MS)
    }

    fn merchant(&self, rng: &mut ChaCha8Rng, category: &str) -> String {
        self.merchants_by_category[category].choose(rng).expect("each category has merchants").clone()
    }
}

fn dimension_tables(config: &GenConfig, rng: &mut ChaCha8Rng) -> (Vec<Category>, Vec<Merchant>, BTreeMap<String, Vec<String>>) {
    let mut labels: Vec<String> = config.category_mix.keys().cloned().collect();
    labels.extend(config.typologies.outlier_categories.iter().cloned());
    let categories: Vec<Category> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| Category { category_id: format!("K{:02}", i + 1), label: l.clone() })
        .collect();

    let mut counts: Vec<(String, usize)> = config
        .category_mix
        .iter()
        .map(|(c, p)| (c.clone(), ((p * config.n_merchants as f64).round() as usize).max(1)))
        .collect();
    let rare = (config.n_merchants / 100).max(1);
    counts.extend(config.typologies.outlier_categories.iter().map(|c| (c.clone(), rare)));

    let mut merchants = Vec::new();
    let mut by_category: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut slots: Vec<&str> = counts.iter().flat_map(|(c, n)| std::iter::repeat_n(c.as_str(), *n)).collect();
    // Interleave categories across merchant ids.
    for i in (1..slots.len()).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    for (i, label) in slots.iter().enumerate() {
        let id = format!("M{:05}", i + 1);
        let category_id = categories.iter().find(|c| c.label == *label).expect("label listed").category_id.clone();
        merchants.push(Merchant { merchant_id: id.clone(), name: format!("Merchant {:05}", i + 1), category_id });
        by_category.entry(label.to_string()).or_default().push(id);
    }
    (categories, merchants, by_category)
}

/// Normal (unlabelled) traffic only.
pub fn generate(config: &GenConfig) -> Result<Corpus, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (categories, merchants, merchants_by_category) = dimension_tables(config, &mut rng);
    let builder = Builder {
        merchants_by_category,
        hours: config.temporal.hourly_weights.iter().enumerate().map(|(h, w)| (h as i64, *w)).collect(),
    };
    let start = config.start_ms()?;
    let warp = CalendarWarp::new(start, &config.temporal);
    let span = config.temporal.span_days as f64;
    let n_normal = config.n_transactions - config.planted_count();
    let regions: Vec<(String, f64)> = config.regions.iter().map(|(k, v)| (k.clone(), *v)).collect();

    let shares: Vec<f64> =
        config.segments.iter().map(|s| s.categories.iter().map(|c| config.category_mix[c]).sum()).collect();
    let mut seg_rows: Vec<usize> = shares.iter().map(|s| (s * n_normal as f64).round() as usize).collect();
    let assigned: usize = seg_rows.iter().sum();
    let last = seg_rows.len() - 1;
    seg_rows[last] = (seg_rows[last] + n_normal).saturating_sub(assigned);

    let natural: Vec<f64> = config
        .segments
        .iter()
        .zip(&seg_rows)
        .map(|(s, &rows)| (rows as f64 / (span / s.mean_gap_days)).max(1.0))
        .collect();
    let card_counts: Vec<usize> = match config.n_cards {
        None => natural.iter().map(|c| c.round() as usize).collect(),
        Some(total) => {
            let sum: f64 = natural.iter().sum();
            natural.iter().map(|c| ((c / sum) * total as f64).round().max(1.0) as usize).collect()
        }
    };

    let gamma = Gamma::new(config.amount.gap_shape, 1.0 / config.amount.gap_shape).expect("positive shape");
    let card_spread = Normal::new(0.0, config.amount.card_sigma).expect("finite sigma");
    let txn_spread = Normal::new(0.0, config.amount.txn_sigma).expect("finite sigma");

    let mut cardholders = Vec::new();
    let mut rows: Vec<LabeledTransaction> = Vec::with_capacity(config.n_transactions);
    for (seg_idx, segment) in config.segments.iter().enumerate() {
        let n_cards = card_counts[seg_idx];
        let mut per_card = vec![0usize; n_cards];
        for _ in 0..seg_rows[seg_idx] {
            per_card[rng.random_range(0..n_cards)] += 1;
        }
        let cats: Vec<(String, f64)> = segment.categories.iter().map(|c| (c.clone(), config.category_mix[c])).collect();
        for count in per_card {
            let card_id = format!("C{:06}", cardholders.len() + 1);
            let region = weighted_pick(&mut rng, &regions).clone();
            cardholders.push(Cardholder {
                card_id: card_id.clone(),
                name: format!("Cardholder {:06}", cardholders.len() + 1),
                region: region.clone(),
            });
            if count == 0 {
                continue;
            }
            let median = segment.amount_median * card_spread.sample(&mut rng).exp();
            let mut op: Vec<f64> = Vec::with_capacity(count);
            let mut acc = 0.0;
            for _ in 0..count {
                acc += gamma.sample(&mut rng);
                op.push(acc);
            }
            // Closing gap makes the process circular; a random phase spreads it over the year.
            acc += gamma.sample(&mut rng);
            let stretch = span / acc;
            let phase = rng.random_range(0.0..span);
            for u in op {
                let day = warp.day_of((u * stretch + phase).rem_euclid(span).min(span - 1e-9));
                let ts = builder.time_in_day(&mut rng, start + day * DAY_MS);
                let category = weighted_pick(&mut rng, &cats).clone();
                let amount = median * txn_spread.sample(&mut rng).exp();
                rows.push(LabeledTransaction {
                    txn: CleanTransaction {
                        txn_id: String::new(),
                        card_id: card_id.clone(),
                        merchant_id: builder.merchant(&mut rng, &category),
                        category_label: category,
                        region: region.clone(),
                        timestamp_ms: ts,
                        amount_cents: cents(amount),
                        cap_applied: false,
                        timestamp_suspect: false,
                        seq: 0,
                    },
                    is_fraud: false,
                    typology: Typology::None,
                });
            }
        }
    }
    let mut corpus = Corpus { cardholders, merchants, categories, rows };
    corpus.renumber();
    Ok(corpus)
}

impl Corpus {
    /// Orders rows by time and assigns sequential ids.
    fn renumber(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.txn.timestamp_ms, &a.txn.card_id, a.txn.amount_cents, &a.txn.merchant_id).cmp(&(
                b.txn.timestamp_ms,
                &b.txn.card_id,
                b.txn.amount_cents,
                &b.txn.merchant_id,
            ))
        });
        for (i, r) in self.rows.iter_mut().enumerate() {
            r.txn.txn_id = format!("T{:07}", i + 1);
            r.txn.seq = i as u64;
        }
    }

    pub fn planted(&self) -> usize {
        self.rows.iter().filter(|r| r.is_fraud).count()
    }

    pub fn to_raw_tables(&self) -> RawTables {
        RawTables {
            transactions: self
                .rows
                .iter()
                .map(|r| RawTransaction {
                    txn_id: r.txn.txn_id.clone(),
                    card_id: r.txn.card_id.clone(),
                    merchant_id: r.txn.merchant_id.clone(),
                    timestamp_ms: r.txn.timestamp_ms,
                    amount_cents: r.txn.amount_cents,
                })
                .collect(),
            cardholders: self.cardholders.clone(),
            merchants: self.merchants.clone(),
            categories: self.categories.clone(),
        }
    }

    /// Writes the four ingest tables and `labels.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        let paths = TablePaths::in_dir(dir);
        let mut w = csv::Writer::from_path(&paths.transactions)?;
        w.write_record(crate::ingest::TRANSACTIONS_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.txn.txn_id.as_str(),
                &r.txn.card_id,
                &r.txn.merchant_id,
                &format_timestamp(r.txn.timestamp_ms),
                &format_amount(r.txn.amount_cents),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(&paths.cardholders)?;
        w.write_record(crate::ingest::CARDHOLDERS_HEADER)?;
        for c in &self.cardholders {
            w.write_record([&c.card_id, &c.name, &c.region])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(&paths.merchants)?;
        w.write_record(crate::ingest::MERCHANTS_HEADER)?;
        for m in &self.merchants {
            w.write_record([&m.merchant_id, &m.name, &m.category_id])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(&paths.categories)?;
        w.write_record(crate::ingest::CATEGORIES_HEADER)?;
        for c in &self.categories {
            w.write_record([&c.category_id, &c.label])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
        w.write_record(["txn_id", "is_fraud", "typology"])?;
        for r in &self.rows {
            w.write_record([r.txn.txn_id.as_str(), if r.is_fraud { "1" } else { "0" }, r.typology.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub is_fraud: bool,
    pub typology: Typology,
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, Label>, SynthError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |reason: String| SynthError::Labels { line, reason };
        if rec.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", rec.len())));
        }
        let is_fraud = match &rec[1] {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("is_fraud must be 0 or 1, found {other:?}"))),
        };
        let typology: Typology = rec[2].parse().map_err(err)?;
        if is_fraud == (typology == Typology::None) {
            return Err(SynthError::Labels { line, reason: "typology disagrees with is_fraud".into() });
        }
        out.insert(rec[0].to_string(), Label { is_fraud, typology });
    }
    Ok(out)
}

/// Rows each typology receives: an even split, with the remainder on sprees.
pub fn typology_quota(planted: usize) -> [(Typology, usize); 5] {
    let per = planted / 5;
    [
        (Typology::HighAmountBurst, per),
        (Typology::RapidUseRun, per),
        (Typology::LateNightHighValue, per),
        (Typology::CategoryOutlier, per),
        (Typology::Spree, planted - 4 * per),
    ]
}

/// Adds `round(anomaly_rate · n_transactions)` planted rows to a corpus from
/// [`generate`], split evenly across the five typologies.
pub fn inject_anomalies(corpus: &mut Corpus, config: &GenConfig) -> Result<(), SynthError> {
    config.validate()?;
    let planted = config.planted_count();
    let p = &config.typologies;
    let need = 5 * p.spree_run_len;
    if planted < need {
        return Err(SynthError::TooSmall { planted, need });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut by_card: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in corpus.rows.iter().enumerate() {
        by_card.entry(r.txn.card_id.clone()).or_default().push(i);
    }
    let mean_of = |card: &str| {
        let idx = &by_card[card];
        idx.iter().map(|&i| corpus.rows[i].txn.amount()).sum::<f64>() / idx.len() as f64
    };
    let eligible: Vec<&String> = by_card.iter().filter(|(_, v)| v.len() >= 2).map(|(k, _)| k).collect();
    let mut burst_pool: Vec<&String> =
        by_card.iter().filter(|(_, v)| v.len() >= p.burst_min_card_rows.max(2)).map(|(k, _)| k).collect();
    if eligible.is_empty() || burst_pool.is_empty() {
        return Err(SynthError::TooSmall { planted, need });
    }
    for i in (1..burst_pool.len()).rev() {
        burst_pool.swap(i, rng.random_range(0..=i));
    }
    let start = config.start_ms()?;
    let end = config.end_ms()?;
    let labels: BTreeMap<&str, &str> = corpus.categories.iter().map(|c| (c.category_id.as_str(), c.label.as_str())).collect();
    let mut outlier_merchants: Vec<(&str, &str)> = Vec::new();
    for m in &corpus.merchants {
        let label = labels[m.category_id.as_str()];
        if p.outlier_categories.iter().any(|c| c == label) {
            outlier_merchants.push((m.merchant_id.as_str(), label));
        }
    }

    let mut new_rows: Vec<LabeledTransaction> = Vec::with_capacity(planted);
    let planted_row = |anchor: &CleanTransaction, ts: i64, amount: f64, typology: Typology| LabeledTransaction {
        txn: CleanTransaction {
            txn_id: String::new(),
            timestamp_ms: ts,
            amount_cents: cents(amount),
            seq: 0,
            ..anchor.clone()
        },
        is_fraud: true,
        typology,
    };
    let pick_anchor = |rng: &mut ChaCha8Rng, card: &str| -> CleanTransaction {
        let idx = &by_card[card];
        corpus.rows[idx[rng.random_range(0..idx.len())]].txn.clone()
    };

    for (typology, quota) in typology_quota(planted) {
        let mut made = 0;
        let mut burst_cursor = 0;
        while made < quota {
            let card = match typology {
                Typology::HighAmountBurst => {
                    let c = burst_pool[burst_cursor % burst_pool.len()];
                    burst_cursor += 1;
                    c.as_str()
                }
                _ => eligible[rng.random_range(0..eligible.len())].as_str(),
            };
            let anchor = pick_anchor(&mut rng, card);
            let mean = mean_of(card);
            let day_start = anchor.timestamp_ms - anchor.timestamp_ms.rem_euclid(DAY_MS);
            match typology {
                Typology::HighAmountBurst => {
                    let ts = rng.random_range(start..end);
                    new_rows.push(planted_row(&anchor, ts, mean * uniform(&mut rng, p.burst_multiplier), typology));
                    made += 1;
                }
                Typology::RapidUseRun => {
                    let mut ts = anchor.timestamp_ms;
                    for _ in 0..p.rapid_run_len.min(quota - made) {
                        ts += (uniform(&mut rng, p.rapid_gap_secs) * 1000.0) as i64;
                        new_rows.push(planted_row(&anchor, ts, uniform(&mut rng, p.rapid_amount), typology));
                        made += 1;
                    }
                }
                Typology::LateNightHighValue => {
                    let ts = day_start + rng.random_range(0..p.late_end_hour as i64 * HOUR_MS);
                    new_rows.push(planted_row(&anchor, ts, uniform(&mut rng, p.late_amount), typology));
                    made += 1;
                }
                Typology::CategoryOutlier => {
                    let ts = rng.random_range(start..end);
                    let (merchant, label) = outlier_merchants[rng.random_range(0..outlier_merchants.len())];
                    let mut row = planted_row(&anchor, ts, mean * uniform(&mut rng, p.outlier_multiplier), typology);
                    row.txn.merchant_id = merchant.to_string();
                    row.txn.category_label = label.to_string();
                    new_rows.push(row);
                    made += 1;
                }
                Typology::Spree => {
                    let left = quota - made;
                    // A short tail joins the final run so every run reaches the daily count.
                    let len = if left < 2 * p.spree_run_len { left } else { p.spree_run_len };
                    let mut ts = day_start + p.spree_start_hour as i64 * HOUR_MS;
                    for _ in 0..len {
                        ts += (uniform(&mut rng, p.spree_gap_secs) * 1000.0) as i64;
                        new_rows.push(planted_row(&anchor, ts, uniform(&mut rng, p.spree_amount), typology));
                        made += 1;
                    }
                }
                Typology::None => unreachable!("not planted"),
            }
        }
    }
    corpus.rows.extend(new_rows);
    enforce_burst_margin(corpus);
    corpus.renumber();
    Ok(())
}

/// Raises burst amounts until each sits more than four standard deviations
/// above its card's mean, measured after the ingest amount cap.
fn enforce_burst_margin(corpus: &mut Corpus) {
    for _ in 0..40 {
        let amounts: Vec<i64> = corpus.rows.iter().map(|r| r.txn.amount_cents).collect();
        let cap = quantile(&amounts, 0.999).expect("non-empty corpus");
        let mut sums: BTreeMap<&str, (f64, f64, f64)> = BTreeMap::new();
        for r in &corpus.rows {
            let a = r.txn.amount_cents.min(cap) as f64;
            let e = sums.entry(r.txn.card_id.as_str()).or_default();
            e.0 += a;
            e.1 += a * a;
            e.2 += 1.0;
        }
        let mut fix = Vec::new();
        for (i, r) in corpus.rows.iter().enumerate() {
            if r.typology != Typology::HighAmountBurst {
                continue;
            }
            let (s, ss, n) = sums[r.txn.card_id.as_str()];
            let mean = s / n;
            let sd = (ss / n - mean * mean).max(0.0).sqrt();
            if (r.txn.amount_cents.min(cap) as f64) <= mean + 4.0 * sd {
                fix.push(i);
            }
        }
        if fix.is_empty() {
            return;
        }
        for i in fix {
            let row = &mut corpus.rows[i].txn;
            row.amount_cents = (row.amount_cents as f64 * 1.5) as i64;
        }
    }
}

pub fn generate_labeled(config: &GenConfig) -> Result<Corpus, SynthError> {
    let mut corpus = generate(config)?;
    inject_anomalies(&mut corpus, config)?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_features, cardholder_stats};
    use crate::ingest::{clean_values, join_unified, CleanOptions};
    use crate::risk::{behavioral_flags, RiskThresholds};

    fn small(n: usize, seed: u64) -> GenConfig {
        GenConfig { n_transactions: n, seed, ..Default::default() }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_labeled(&small(8_000, 5)).unwrap();
        let b = generate_labeled(&small(8_000, 5)).unwrap();
        assert_eq!(a, b);
        let c = generate_labeled(&small(8_000, 6)).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn planted_count_and_split() {
        let corpus = generate_labeled(&small(10_000, 42)).unwrap();
        assert_eq!(corpus.rows.len(), 10_000);
        assert_eq!(corpus.planted(), 150);
        for (t, quota) in typology_quota(150) {
            assert_eq!(corpus.rows.iter().filter(|r| r.typology == t).count(), quota, "{t}");
        }
        assert!(corpus.rows.iter().all(|r| r.is_fraud == (r.typology != Typology::None)));
    }

    #[test]
    fn ids_follow_time_order() {
        let corpus = generate_labeled(&small(6_000, 3)).unwrap();
        for (i, w) in corpus.rows.windows(2).enumerate() {
            assert!(w[0].txn.timestamp_ms <= w[1].txn.timestamp_ms);
            assert!(w[0].txn.txn_id < w[1].txn.txn_id);
            assert_eq!(w[0].txn.seq, i as u64);
        }
        let cfg = small(6_000, 3);
        let (start, end) = (cfg.start_ms().unwrap(), cfg.end_ms().unwrap());
        assert!(corpus.rows.iter().all(|r| r.txn.timestamp_ms >= start && r.txn.timestamp_ms < end + DAY_MS));
    }

    #[test]
    fn normal_amount_and_category_shape() {
        let corpus = generate(&small(100_000, 42)).unwrap();
        let n = corpus.rows.len() as f64;
        let below = corpus.rows.iter().filter(|r| r.txn.amount() < 100.0).count() as f64 / n;
        assert!((0.88..=0.92).contains(&below), "share below 100: {below}");
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &corpus.rows {
            *counts.entry(r.txn.category_label.as_str()).or_default() += 1;
        }
        let mut c: Vec<usize> = counts.values().copied().collect();
        c.sort_unstable_by(|a, b| b.cmp(a));
        assert!(c.iter().take(3).sum::<usize>() as f64 / n > 0.5);
        for (cat, p) in &small(1, 1).category_mix {
            let share = counts[cat.as_str()] as f64 / n;
            assert!((share - p).abs() < 0.01, "{cat}: {share} vs {p}");
        }
    }

    #[test]
    fn disjoint_seeds_differ_but_both_calibrate() {
        let share = |seed| {
            let c = generate(&small(100_000, seed)).unwrap();
            c.rows.iter().filter(|r| r.txn.amount() < 100.0).count() as f64 / c.rows.len() as f64
        };
        let (a, b) = (share(1), share(2));
        assert_ne!(a, b);
        assert!((0.88..=0.92).contains(&a) && (0.88..=0.92).contains(&b), "{a} {b}");
    }

    #[test]
    fn evenings_and_december_are_busier() {
        let corpus = generate(&small(60_000, 9)).unwrap();
        let mut hours = [0usize; 24];
        let mut months = [0usize; 12];
        for r in &corpus.rows {
            let t = chrono::DateTime::from_timestamp_millis(r.txn.timestamp_ms).unwrap();
            hours[chrono::Timelike::hour(&t) as usize] += 1;
            months[t.month0() as usize] += 1;
        }
        assert!(hours[21] > 3 * hours[4]);
        let other = months[..11].iter().sum::<usize>() as f64 / 11.0;
        assert!(months[11] as f64 > 1.15 * other, "{months:?}");
    }

    #[test]
    fn planted_rows_trip_their_rules() {
        let cfg = small(20_000, 11);
        let corpus = generate_labeled(&cfg).unwrap();
        let typology: BTreeMap<&str, Typology> = corpus.rows.iter().map(|r| (r.txn.txn_id.as_str(), r.typology)).collect();
        let (joined, join_report) = join_unified(&corpus.to_raw_tables());
        assert_eq!(join_report.dropped_missing_id, 0);
        let opts = CleanOptions { ingestion_cutoff_ms: Some(cfg.end_ms().unwrap()), ..Default::default() };
        let (txns, report) = clean_values(joined, &opts).unwrap();
        assert_eq!(report.suspect_timestamps, 0);
        let stats = cardholder_stats(&txns);
        let features = build_features(&txns, &stats).unwrap();
        let (flags, _) = behavioral_flags(&txns, &features, &stats, &RiskThresholds::default()).unwrap();
        for (i, t) in txns.iter().enumerate() {
            match typology[t.txn_id.as_str()] {
                Typology::HighAmountBurst => assert!(flags[i].unusual_spend, "{}", t.txn_id),
                Typology::RapidUseRun => assert!(flags[i].rapid_use, "{}", t.txn_id),
                Typology::Spree => assert!(flags[i].spending_spree, "{}", t.txn_id),
                Typology::LateNightHighValue => {
                    let hour = (t.timestamp_ms.rem_euclid(DAY_MS) / HOUR_MS) as u32;
                    assert!(hour < cfg.typologies.late_end_hour);
                }
                Typology::CategoryOutlier => assert!(cfg.typologies.outlier_categories.contains(&t.category_label)),
                Typology::None => {}
            }
        }
    }

    #[test]
    fn files_round_trip() {
        let corpus = generate_labeled(&small(5_000, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path()).unwrap();
        let raw = crate::ingest::load_tables(&TablePaths::in_dir(dir.path())).unwrap();
        assert_eq!(raw, corpus.to_raw_tables());
        let labels = read_labels(&dir.path().join("labels.csv")).unwrap();
        assert_eq!(labels.len(), corpus.rows.len());
        for r in &corpus.rows {
            assert_eq!(labels[&r.txn.txn_id], Label { is_fraud: r.is_fraud, typology: r.typology });
        }
    }

    #[test]
    fn bad_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        std::fs::write(&path, "txn_id,is_fraud,typology\nT1,1,none\n").unwrap();
        assert!(matches!(read_labels(&path), Err(SynthError::Labels { .. })));
        std::fs::write(&path, "txn_id,is_fraud,typology\nT1,0,bogus\n").unwrap();
        assert!(matches!(read_labels(&path), Err(SynthError::Labels { .. })));
    }

    #[test]
    fn typology_names_parse() {
        for t in Typology::PLANTED.into_iter().chain([Typology::None]) {
            assert_eq!(t.as_str().parse::<Typology>().unwrap(), t);
        }
        assert!("other".parse::<Typology>().is_err());
    }

    #[test]
    fn config_errors() {
        assert!(matches!(generate_labeled(&small(3_000, 1)), Err(SynthError::TooSmall { planted: 45, need: 50 })));
        let mut cfg = small(10_000, 1);
        cfg.category_mix.insert("pub".into(), 0.5);
        assert!(matches!(cfg.validate(), Err(SynthError::Config(_))));
        let cfg = GenConfig { anomaly_rate: 0.0, ..small(10_000, 1) };
        assert!(cfg.validate().is_err());
        let mut cfg = small(10_000, 1);
        cfg.typologies.rapid_gap_secs = (5.0, 90.0);
        assert!(cfg.validate().is_err());
        let mut cfg = small(10_000, 1);
        cfg.temporal.start_date = "2024-13-01".into();
        assert!(cfg.validate().is_err());
        let toml_text = toml::to_string(&GenConfig::default()).unwrap();
        let back: GenConfig = toml::from_str(&toml_text).unwrap();
        assert_eq!(back, GenConfig::default());
    }
}
