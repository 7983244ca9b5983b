//! Adaptive risk scoring: a linear score over detector flags and two
//! behavioral deltas, with context-seeded weights refined online by
//! mini-batch gradient descent.
//!
//! ```text
//! R = w1·f_IF + w2·f_OCSVM + w3·f_AE + w4·Δ_Spend + w5·Δ_Time
//! ```
//!
//! Labelled rows use logistic cross-entropy on `R`; unlabelled rows with a
//! confident pseudo-label use a hinge around the running 95th percentile.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::CardholderStats;
use crate::quantile::quantile_sorted;

pub const N_WEIGHTS: usize = 5;
pub const WEIGHT_NAMES: [&str; N_WEIGHTS] = ["w_if", "w_ocsvm", "w_ae", "w_spend", "w_time"];
pub const DEFAULT_GROUP: &str = "global";

#[derive(Debug, Error, PartialEq)]
pub enum ArfError {
    #[error("prior {0} outside (0, 1)")]
    Prior(f64),
    #[error("volatility {0} outside [0, 1]")]
    Volatility(f64),
    #[error("legal weight {0} must be non-negative")]
    LegalWeight(f64),
    #[error("invalid ARF config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArfContext {
    pub region_group: String,
    pub prior: f64,
    pub volatility: f64,
    pub legal_weight: f64,
}

impl ArfContext {
    pub fn validate(&self) -> Result<(), ArfError> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(ArfError::Prior(self.prior));
        }
        if !(0.0..=1.0).contains(&self.volatility) {
            return Err(ArfError::Volatility(self.volatility));
        }
        if !(self.legal_weight >= 0.0 && self.legal_weight.is_finite()) {
            return Err(ArfError::LegalWeight(self.legal_weight));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArfConfig {
    pub learning_rate: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub w_max: f64,
    pub window: usize,
    pub tau_quantile: f64,
    /// Scores needed before the percentile clause of the high-risk rule applies.
    pub warmup: usize,
    pub spend_cap: f64,
    pub time_horizon_secs: f64,
    pub base_weight: f64,
    pub prior_reference: f64,
}

impl Default for ArfConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            margin: 1.0,
            batch_size: 32,
            w_max: 5.0,
            window: 10_000,
            tau_quantile: 0.95,
            warmup: 100,
            spend_cap: 10.0,
            time_horizon_secs: 3600.0,
            base_weight: 0.2,
            prior_reference: 0.005,
        }
    }
}

impl ArfConfig {
    pub fn validate(&self) -> Result<(), ArfError> {
        if !(self.learning_rate > 0.0) || !(self.margin > 0.0) {
            return Err(ArfError::Config("learning rate and margin must be positive".into()));
        }
        if self.batch_size == 0 || self.window == 0 {
            return Err(ArfError::Config("batch size and window must be positive".into()));
        }
        if !(self.w_max > 0.0) {
            return Err(ArfError::Config("w_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArfFeatures {
    pub f_if: f64,
    pub f_ocsvm: f64,
    pub f_ae: f64,
    pub delta_spend: f64,
    pub delta_time: f64,
}

impl ArfFeatures {
    pub fn as_array(&self) -> [f64; N_WEIGHTS] {
        [self.f_if, self.f_ocsvm, self.f_ae, self.delta_spend, self.delta_time]
    }

    pub fn detector_count(&self) -> usize {
        [self.f_if, self.f_ocsvm, self.f_ae].iter().filter(|&&f| f > 0.0).count()
    }
}

/// `|amount − mean| / σ` capped at `cap`; zero when σ is zero.
pub fn delta_spend(amount: f64, stats: &CardholderStats, cap: f64) -> f64 {
    if stats.std_amount > 0.0 {
        ((amount - stats.mean_amount).abs() / stats.std_amount).min(cap)
    } else {
        0.0
    }
}

/// Linear recency ramp: 1 at zero seconds, 0 at `horizon` and beyond.
pub fn delta_time(seconds_since_last: f64, horizon: f64) -> f64 {
    (1.0 - seconds_since_last / horizon).clamp(0.0, 1.0)
}

pub fn build_features(
    detector_flags: [bool; 3],
    amount: f64,
    stats: &CardholderStats,
    seconds_since_last: f64,
    config: &ArfConfig,
) -> ArfFeatures {
    let b = |f: bool| if f { 1.0 } else { 0.0 };
    ArfFeatures {
        f_if: b(detector_flags[0]),
        f_ocsvm: b(detector_flags[1]),
        f_ae: b(detector_flags[2]),
        delta_spend: delta_spend(amount, stats, config.spend_cap),
        delta_time: delta_time(seconds_since_last, config.time_horizon_secs),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArfWeights {
    pub w: [f64; N_WEIGHTS],
    pub update_count: u64,
    pub context_group: String,
}

pub fn init_weights(ctx: &ArfContext, config: &ArfConfig) -> Result<ArfWeights, ArfError> {
    ctx.validate()?;
    let base = config.base_weight;
    let behavioral = base
        * (1.0 + ctx.prior / config.prior_reference)
        * (1.0 + 0.5 * ctx.volatility)
        * (1.0 + 0.25 * ctx.legal_weight);
    let w = [base, base, base, behavioral, behavioral].map(|v| v.clamp(0.0, config.w_max));
    Ok(ArfWeights { w, update_count: 0, context_group: ctx.region_group.clone() })
}

pub fn score(w: &[f64; N_WEIGHTS], f: &ArfFeatures) -> f64 {
    w.iter().zip(f.as_array()).map(|(w, f)| w * f).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoLabel {
    Positive,
    Negative,
    Abstain,
}

pub fn pseudo_label(f: &ArfFeatures) -> PseudoLabel {
    if f.delta_spend > 3.0 {
        PseudoLabel::Positive
    } else if f.delta_spend < 0.5 && f.detector_count() == 0 {
        PseudoLabel::Negative
    } else {
        PseudoLabel::Abstain
    }
}

/// One training example: a true label `y ∈ {0,1}` (cross-entropy) or a
/// pseudo-label `y ∈ {−1,+1}` (hinge around `tau`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Truth { y: f64 },
    Pseudo { y: f64, tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: ArfFeatures,
    pub target: Target,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean loss over the batch.
pub fn batch_loss(w: &[f64; N_WEIGHTS], batch: &[Example], margin: f64) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|ex| {
            let r = score(w, &ex.features);
            match ex.target {
                Target::Truth { y } => {
                    // ln(1 + e^r) - y·r, computed stably.
                    let softplus = if r > 0.0 { r + (-r).exp().ln_1p() } else { r.exp().ln_1p() };
                    softplus - y * r
                }
                Target::Pseudo { y, tau } => (margin - y * (r - tau)).max(0.0),
            }
        })
        .sum();
    total / batch.len() as f64
}

/// Mean gradient of `batch_loss` with respect to the weights.
pub fn batch_gradient(w: &[f64; N_WEIGHTS], batch: &[Example], margin: f64) -> [f64; N_WEIGHTS] {
    let mut g = [0.0; N_WEIGHTS];
    for ex in batch {
        let r = score(w, &ex.features);
        let coef = match ex.target {
            Target::Truth { y } => sigmoid(r) - y,
            Target::Pseudo { y, tau } => {
                if margin - y * (r - tau) > 0.0 {
                    -y
                } else {
                    0.0
                }
            }
        };
        for (gi, fi) in g.iter_mut().zip(ex.features.as_array()) {
            *gi += coef * fi;
        }
    }
    g.map(|v| v / batch.len() as f64)
}

/// One projected gradient step. Returns `false` (weights untouched) on an
/// empty batch.
pub fn update(weights: &mut ArfWeights, batch: &[Example], config: &ArfConfig) -> bool {
    if batch.is_empty() {
        return false;
    }
    let g = batch_gradient(&weights.w, batch, config.margin);
    for (w, gi) in weights.w.iter_mut().zip(g) {
        *w = (*w - config.learning_rate * gi).clamp(0.0, config.w_max);
    }
    weights.update_count += 1;
    true
}

/// Sliding window of the most recent scores with nearest-rank percentiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileTracker {
    capacity: usize,
    recent: VecDeque<f64>,
    sorted: Vec<f64>,
}

impl PercentileTracker {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, recent: VecDeque::with_capacity(capacity), sorted: Vec::with_capacity(capacity) }
    }

    pub fn push(&mut self, x: f64) {
        if self.recent.len() == self.capacity {
            let old = self.recent.pop_front().expect("full window");
            let pos = self.sorted.partition_point(|v| v.total_cmp(&old).is_lt());
            self.sorted.remove(pos);
        }
        self.recent.push_back(x);
        let pos = self.sorted.partition_point(|v| v.total_cmp(&x).is_le());
        self.sorted.insert(pos, x);
    }

    pub fn len(&self) -> usize {
        self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recent.is_empty()
    }

    pub fn percentile(&self, q: f64) -> Option<f64> {
        quantile_sorted(&self.sorted, q)
    }
}

/// High risk when `R` tops the running percentile (once warm), at least two
/// detectors fire, or a 3σ amount deviation coincides with sub-minute reuse.
pub fn high_risk_rule(r: f64, tau: Option<f64>, f: &ArfFeatures, seconds_since_last: f64) -> bool {
    tau.is_some_and(|t| r > t) || f.detector_count() >= 2 || (f.delta_spend > 3.0 && seconds_since_last < 60.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp_ms: i64,
    pub context_group: String,
    pub weights: [f64; N_WEIGHTS],
    pub update_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamItem {
    pub txn_id: String,
    pub timestamp_ms: i64,
    #[serde(default = "default_group")]
    pub group: String,
    pub features: ArfFeatures,
    pub seconds_since_last: f64,
    /// Ground truth in {0, 1} when known.
    #[serde(default)]
    pub label: Option<u8>,
}

fn default_group() -> String {
    DEFAULT_GROUP.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub txn_id: String,
    pub group: String,
    pub score: f64,
    pub tau: Option<f64>,
    pub high_risk: bool,
    pub update_count: u64,
    /// Weights the score was computed with.
    pub weights: [f64; N_WEIGHTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupState {
    weights: ArfWeights,
    tracker: PercentileTracker,
    pending: Vec<Example>,
}

/// Per-group weights, percentile trackers and pending mini-batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArfEngine {
    pub config: ArfConfig,
    groups: BTreeMap<String, GroupState>,
    default_context: ArfContext,
    pub audit: Vec<AuditRecord>,
    pub skipped_batches: u64,
}

impl ArfEngine {
    pub fn new(config: ArfConfig, contexts: &[ArfContext]) -> Result<Self, ArfError> {
        config.validate()?;
        let default_context = ArfContext {
            region_group: DEFAULT_GROUP.to_string(),
            prior: config.prior_reference,
            volatility: 0.0,
            legal_weight: 0.0,
        };
        let mut engine = Self { config, groups: BTreeMap::new(), default_context, audit: Vec::new(), skipped_batches: 0 };
        for ctx in contexts {
            engine.add_group(ctx)?;
        }
        Ok(engine)
    }

    pub fn add_group(&mut self, ctx: &ArfContext) -> Result<(), ArfError> {
        let weights = init_weights(ctx, &self.config)?;
        self.groups.insert(
            ctx.region_group.clone(),
            GroupState { weights, tracker: PercentileTracker::new(self.config.window), pending: Vec::new() },
        );
        Ok(())
    }

    fn group_mut(&mut self, group: &str) -> &mut GroupState {
        if !self.groups.contains_key(group) {
            let ctx = ArfContext { region_group: group.to_string(), ..self.default_context.clone() };
            self.add_group(&ctx).expect("default context is valid");
        }
        self.groups.get_mut(group).expect("group inserted")
    }

    pub fn weights(&self, group: &str) -> Option<&ArfWeights> {
        self.groups.get(group).map(|g| &g.weights)
    }

    pub fn all_weights(&self) -> impl Iterator<Item = &ArfWeights> {
        self.groups.values().map(|g| &g.weights)
    }

    /// Scores one transaction, then queues it for learning.
    pub fn process(&mut self, item: &StreamItem) -> Decision {
        let config = self.config.clone();
        let state = self.group_mut(&item.group);
        let used = state.weights.w;
        let r = score(&used, &item.features);
        let tau_now = state.tracker.percentile(config.tau_quantile);
        let warm_tau = if state.tracker.len() >= config.warmup { tau_now } else { None };
        let high_risk = high_risk_rule(r, warm_tau, &item.features, item.seconds_since_last);
        state.tracker.push(r);

        let target = match item.label {
            Some(y) => Some(Target::Truth { y: f64::from(y.min(1)) }),
            None => {
                let tau = tau_now.unwrap_or(r);
                match pseudo_label(&item.features) {
                    PseudoLabel::Positive => Some(Target::Pseudo { y: 1.0, tau }),
                    PseudoLabel::Negative => Some(Target::Pseudo { y: -1.0, tau }),
                    PseudoLabel::Abstain => None,
                }
            }
        };
        if let Some(target) = target {
            state.pending.push(Example { features: item.features, target });
        }
        let mut record = None;
        if state.pending.len() >= config.batch_size {
            let batch = std::mem::take(&mut state.pending);
            update(&mut state.weights, &batch, &config);
            record = Some(AuditRecord {
                timestamp_ms: item.timestamp_ms,
                context_group: item.group.clone(),
                weights: state.weights.w,
                update_count: state.weights.update_count,
            });
        }
        let update_count = state.weights.update_count;
        self.audit.extend(record);
        Decision {
            txn_id: item.txn_id.clone(),
            group: item.group.clone(),
            score: r,
            tau: warm_tau,
            high_risk,
            update_count,
            weights: used,
        }
    }

    /// Applies any partially filled batches.
    pub fn flush(&mut self, timestamp_ms: i64) {
        let config = self.config.clone();
        for (name, state) in self.groups.iter_mut() {
            let batch = std::mem::take(&mut state.pending);
            if update(&mut state.weights, &batch, &config) {
                self.audit.push(AuditRecord {
                    timestamp_ms,
                    context_group: name.clone(),
                    weights: state.weights.w,
                    update_count: state.weights.update_count,
                });
            } else {
                self.skipped_batches += 1;
            }
        }
    }

    pub fn write_audit_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for rec in &self.audit {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Coefficient of variation of daily counts, clipped to `[0, 1]`.
/// Days with no activity inside `[first_day, last_day]` count as zero.
pub fn volatility(days: &[i64]) -> f64 {
    let Some((&lo, &hi)) = days.iter().min().zip(days.iter().max()) else { return 0.0 };
    let mut counts = vec![0.0f64; (hi - lo + 1) as usize];
    for d in days {
        counts[(d - lo) as usize] += 1.0;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    if mean > 0.0 {
        (var.sqrt() / mean).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Synthetic stream whose planted positives carry the isolation-forest and
/// SVM flags in the first half and only the autoencoder flag in the second.
pub fn typology_switch_stream(n: usize, positive_rate: f64, false_flag_rate: f64, seed: u64) -> Vec<StreamItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spend = Normal::new(0.0, 1.0).expect("valid normal");
    let gap = Exp::new(1.0 / 1800.0).expect("valid rate");
    let mut ts = 1_700_000_000_000i64;
    (0..n)
        .map(|i| {
            let positive = rng.random_bool(positive_rate);
            let second_half = i >= n / 2;
            let noise = |rng: &mut ChaCha8Rng| rng.random_bool(false_flag_rate);
            let (f_if, f_oc, f_ae) = match (positive, second_half) {
                (true, false) => (true, true, noise(&mut rng)),
                (true, true) => (noise(&mut rng), noise(&mut rng), true),
                _ => (noise(&mut rng), noise(&mut rng), noise(&mut rng)),
            };
            let secs: f64 = gap.sample(&mut rng);
            ts += (secs * 1000.0) as i64;
            let b = |f: bool| if f { 1.0 } else { 0.0 };
            StreamItem {
                txn_id: format!("s{i:07}"),
                timestamp_ms: ts,
                group: DEFAULT_GROUP.to_string(),
                features: ArfFeatures {
                    f_if: b(f_if),
                    f_ocsvm: b(f_oc),
                    f_ae: b(f_ae),
                    delta_spend: f64::abs(spend.sample(&mut rng)).min(10.0),
                    delta_time: delta_time(secs, 3600.0),
                },
                seconds_since_last: secs,
                label: Some(u8::from(positive)),
            }
        })
        .collect()
}
