//! Stage functions and the end-to-end run.
//!
//! Each stage has a pure compute function; [`run_pipeline`] chains them and
//! writes every artifact under the configured output directory. Nothing
//! written depends on wall-clock time, so identical configs give identical
//! bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{ArfSettings, ClusterSettings, PipelineConfig};
use super::metrics::{metrics, EvalReport, EvalRow};
use super::persist;
use super::report::{render_reports, ReportInputs};
use crate::arf::{self, ArfContext, ArfEngine, Decision, StreamItem};
use crate::autoencoder::{AutoencoderModel, TrainHistory};
use crate::cluster::{
    dbscan, elbow_curve, k_distance, kmeans_fit, pca_project, silhouette, DbscanConfig, DbscanResult, KMeansModel,
    PcaModel,
};
use crate::features::{self, CardholderStats, FeatureMatrix, FeatureVector};
use crate::iforest::{IforestConfig, IsolationForestModel};
use crate::ingest::{self, CleanOptions, CleanTransaction, IngestReport, TablePaths};
use crate::matrix::Matrix;
use crate::ocsvm::{OcsvmConfig, OcsvmModel};
use crate::risk::{self, EntityRisk, GroupBy, IndicatorFlags, RiskTable, TimeWindowStats};
use crate::synthgen::{self, Corpus, Label, Typology};

const DAY_MS: i64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Gen,
    Ingest,
    Features,
    Train,
    Score,
    Cluster,
    Risk,
    Arf,
    Eval,
    Report,
    Sweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Gen => "gen",
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Cluster => "cluster",
            Stage::Risk => "risk",
            Stage::Arf => "arf",
            Stage::Eval => "eval",
            Stage::Report => "report",
            Stage::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {cause}")]
pub struct PipelineError {
    pub stage: Stage,
    pub cause: String,
}

impl PipelineError {
    pub fn new(stage: Stage, cause: impl fmt::Display) -> Self {
        Self { stage, cause: cause.to_string() }
    }
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e)
}

/// File locations inside an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn clean_csv(&self) -> PathBuf {
        self.root.join("clean.csv")
    }
    pub fn features_csv(&self) -> PathBuf {
        self.root.join("features.csv")
    }
    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.json"))
    }
    pub fn scores_csv(&self) -> PathBuf {
        self.root.join("scores.csv")
    }
    pub fn cluster_dir(&self) -> PathBuf {
        self.root.join("cluster")
    }
    pub fn risk_dir(&self) -> PathBuf {
        self.root.join("risk")
    }
    pub fn arf_dir(&self) -> PathBuf {
        self.root.join("arf")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.root.join("eval.csv")
    }
    pub fn eval_json(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }
    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn create(path: &Path) -> std::io::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()
}

// ---------------------------------------------------------------- gen/ingest

pub fn generate_corpus(cfg: &PipelineConfig) -> Result<Corpus, PipelineError> {
    synthgen::generate_labeled(&cfg.generator).map_err(at(Stage::Gen))
}

/// Clean options with the cutoff defaulted to the generated span (plus a day
/// of slack) when the tables came from the generator.
pub fn clean_options(cfg: &PipelineConfig) -> CleanOptions {
    let mut opts = cfg.ingest.clone();
    if opts.ingestion_cutoff_ms.is_none() && cfg.paths.input_dir.is_none() {
        opts.ingestion_cutoff_ms = cfg.generator.end_ms().ok().map(|e| e + DAY_MS);
    }
    opts
}

pub struct Dataset {
    pub txns: Vec<CleanTransaction>,
    pub report: IngestReport,
    pub labels: Option<BTreeMap<String, Label>>,
}

impl Dataset {
    /// Per-row labels aligned with `txns`; rows missing from the labels file count as normal.
    pub fn typologies(&self) -> Option<Vec<Typology>> {
        let labels = self.labels.as_ref()?;
        Some(self.txns.iter().map(|t| labels.get(&t.txn_id).map_or(Typology::None, |l| l.typology)).collect())
    }
}

pub fn ingest_dir(dir: &Path, opts: &CleanOptions) -> Result<Dataset, PipelineError> {
    let (txns, report) = ingest::ingest(&TablePaths::in_dir(dir), opts).map_err(at(Stage::Ingest))?;
    if txns.is_empty() {
        return Err(PipelineError::new(Stage::Ingest, "no transactions survived the join"));
    }
    let label_path = dir.join("labels.csv");
    let labels = if label_path.exists() {
        Some(synthgen::read_labels(&label_path).map_err(at(Stage::Ingest))?)
    } else {
        None
    };
    Ok(Dataset { txns, report, labels })
}

/// In-memory equivalent of writing a corpus and ingesting it.
pub fn ingest_corpus(corpus: &Corpus, opts: &CleanOptions) -> Result<Dataset, PipelineError> {
    let (joined, join_report) = ingest::join_unified(&corpus.to_raw_tables());
    let (txns, clean_report) = ingest::clean_values(joined, opts).map_err(at(Stage::Ingest))?;
    let labels = corpus
        .rows
        .iter()
        .map(|r| (r.txn.txn_id.clone(), Label { is_fraud: r.is_fraud, typology: r.typology }))
        .collect();
    let report = IngestReport {
        capped: clean_report.capped,
        suspect_timestamps: clean_report.suspect_timestamps,
        ..join_report
    };
    Ok(Dataset { txns, report, labels: Some(labels) })
}

// ------------------------------------------------------------------ features

pub struct FeatureSet {
    pub stats: BTreeMap<String, CardholderStats>,
    pub features: Vec<FeatureVector>,
    pub matrix: FeatureMatrix,
}

pub fn derive_features(txns: &[CleanTransaction]) -> Result<FeatureSet, PipelineError> {
    let stats = features::cardholder_stats(txns);
    let vectors = features::build_features(txns, &stats).map_err(at(Stage::Features))?;
    let matrix = features::build_matrix(&features::raw_model_matrix(&vectors));
    Ok(FeatureSet { stats, features: vectors, matrix })
}

/// Standardizes with stored parameters instead of refitting.
pub fn derive_features_with(
    txns: &[CleanTransaction],
    params: &features::StandardizationParams,
) -> Result<FeatureSet, PipelineError> {
    let stats = features::cardholder_stats(txns);
    let vectors = features::build_features(txns, &stats).map_err(at(Stage::Features))?;
    let data = params.transform(&features::raw_model_matrix(&vectors));
    Ok(FeatureSet { stats, features: vectors, matrix: FeatureMatrix { data, params: params.clone() } })
}

// --------------------------------------------------------------------- train

pub struct Detectors {
    pub iforest: IsolationForestModel,
    pub ocsvm: OcsvmModel,
    pub autoencoder: AutoencoderModel,
    pub history: TrainHistory,
}

pub fn train_detectors(cfg: &PipelineConfig, data: &Matrix) -> Result<Detectors, PipelineError> {
    let (ae, (forest, svm)) = rayon::join(
        || AutoencoderModel::train(data, &cfg.autoencoder).map_err(at(Stage::Train)),
        || {
            rayon::join(
                || IsolationForestModel::fit(data, &cfg.iforest).map_err(at(Stage::Train)),
                || OcsvmModel::fit(data, &cfg.ocsvm).map_err(at(Stage::Train)),
            )
        },
    );
    let (mut autoencoder, history) = ae?;
    autoencoder.standardization_ref = Some("models/standardization.json".into());
    Ok(Detectors { iforest: forest?, ocsvm: svm?, autoencoder, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorScores {
    pub if_score: Vec<f64>,
    pub if_flag: Vec<bool>,
    pub ocsvm_decision: Vec<f64>,
    pub ocsvm_flag: Vec<bool>,
    pub ae_error: Vec<f64>,
    pub ae_flag: Vec<bool>,
}

impl DetectorScores {
    /// Larger means more anomalous for every detector.
    pub fn ocsvm_anomaly(&self) -> Vec<f64> {
        self.ocsvm_decision.iter().map(|d| -d).collect()
    }

    pub fn write_csv(&self, path: &Path, txns: &[CleanTransaction]) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["txn_id", "if_score", "if_flag", "ocsvm_decision", "ocsvm_flag", "ae_error", "ae_flag"])?;
        for (i, t) in txns.iter().enumerate() {
            let b = |x: bool| if x { "1" } else { "0" };
            w.write_record([
                t.txn_id.as_str(),
                &self.if_score[i].to_string(),
                b(self.if_flag[i]),
                &self.ocsvm_decision[i].to_string(),
                b(self.ocsvm_flag[i]),
                &self.ae_error[i].to_string(),
                b(self.ae_flag[i]),
            ])?;
        }
        w.flush()
    }
}

/// Scores rows. `training` selects the exact top-fraction rule for the
/// forest, which is what its contamination means on the fitting data.
pub fn score_detectors(det: &Detectors, data: &Matrix, training: bool) -> Result<DetectorScores, PipelineError> {
    let if_score = det.iforest.score_matrix(data).map_err(at(Stage::Score))?;
    let if_flag = if training { det.iforest.flag_training(&if_score) } else { det.iforest.flag(&if_score) };
    let ocsvm_decision = det.ocsvm.decision_matrix(data).map_err(at(Stage::Score))?;
    let ocsvm_flag = OcsvmModel::flag(&ocsvm_decision);
    let ae_error = det.autoencoder.reconstruction_errors(data).map_err(at(Stage::Score))?;
    let ae_flag = det.autoencoder.flag(&ae_error);
    Ok(DetectorScores { if_score, if_flag, ocsvm_decision, ocsvm_flag, ae_error, ae_flag })
}

pub fn save_models(layout: &Layout, fs: &FeatureSet, det: &Detectors) -> Result<(), PipelineError> {
    let err = Stage::Train;
    persist::save(&layout.model("standardization"), &fs.matrix.params).map_err(at(err))?;
    persist::save(&layout.model("iforest"), &det.iforest).map_err(at(err))?;
    persist::save(&layout.model("ocsvm"), &det.ocsvm).map_err(at(err))?;
    persist::save(&layout.model("autoencoder"), &det.autoencoder).map_err(at(err))?;
    let mut w = create(&layout.root.join("models").join("autoencoder_history.csv")).map_err(at(err))?;
    det.history.write_csv(&mut w).map_err(at(err))?;
    w.flush().map_err(at(err))
}

pub fn load_models(layout: &Layout) -> Result<(features::StandardizationParams, Detectors), PipelineError> {
    let err = Stage::Score;
    let params = persist::load(&layout.model("standardization")).map_err(at(err))?;
    let det = Detectors {
        iforest: persist::load(&layout.model("iforest")).map_err(at(err))?,
        ocsvm: persist::load(&layout.model("ocsvm")).map_err(at(err))?,
        autoencoder: persist::load(&layout.model("autoencoder")).map_err(at(err))?,
        history: TrainHistory::default(),
    };
    Ok((params, det))
}

/// Epoch records written next to the autoencoder model.
pub fn read_history(layout: &Layout) -> Result<TrainHistory, PipelineError> {
    let err = Stage::Report;
    let mut rdr = csv::Reader::from_path(layout.root.join("models").join("autoencoder_history.csv")).map_err(at(err))?;
    let epochs = rdr.deserialize().collect::<Result<Vec<_>, _>>().map_err(at(err))?;
    Ok(TrainHistory { epochs, ..TrainHistory::default() })
}

// ------------------------------------------------------------------- cluster

pub struct ClusterOutput {
    pub kmeans: KMeansModel,
    pub silhouette: f64,
    pub elbow: Vec<(usize, f64)>,
    pub dbscan: DbscanResult,
    pub k_distance: Vec<f64>,
    pub pca: PcaModel,
    pub projection: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub inertia: f64,
    pub cluster_sizes: Vec<usize>,
    pub silhouette: f64,
    pub elbow_monotone: bool,
    pub dbscan_eps: f64,
    pub dbscan_min_samples: usize,
    pub dbscan_clusters: usize,
    pub dbscan_noise_fraction: f64,
    pub pca_explained_variance_ratio: Vec<f64>,
}

impl ClusterOutput {
    pub fn summary(&self) -> ClusterSummary {
        ClusterSummary {
            k: self.kmeans.config.k,
            inertia: self.kmeans.inertia,
            cluster_sizes: self.kmeans.cluster_sizes(),
            silhouette: self.silhouette,
            elbow_monotone: self.elbow.windows(2).all(|w| w[1].1 <= w[0].1),
            dbscan_eps: self.dbscan.eps,
            dbscan_min_samples: self.dbscan.min_samples,
            dbscan_clusters: self.dbscan.n_clusters,
            dbscan_noise_fraction: self.dbscan.noise_fraction(),
            pca_explained_variance_ratio: self.pca.explained_variance_ratio.clone(),
        }
    }
}

/// k-distance curve over a seeded row sample, largest distance first.
pub fn sampled_k_distance(data: &Matrix, k: usize, sample: usize, seed: u64) -> Result<Vec<f64>, PipelineError> {
    let rows = if data.rows() > sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, data.rows(), sample).into_vec();
        idx.sort_unstable();
        data.select_rows(&idx)
    } else {
        data.clone()
    };
    let mut d = k_distance(&rows, k).map_err(at(Stage::Cluster))?;
    d.reverse();
    Ok(d)
}

pub fn cluster_features(settings: &ClusterSettings, seed: u64, data: &Matrix) -> Result<ClusterOutput, PipelineError> {
    let err = Stage::Cluster;
    let kmeans = kmeans_fit(data, &settings.kmeans).map_err(at(err))?;
    let silhouette = silhouette(data, &kmeans.labels, settings.silhouette_sample, seed).map_err(at(err))?;
    let max_k = settings.elbow_max_k.min(data.rows());
    let ks: Vec<usize> = (1..=max_k).collect();
    let elbow = elbow_curve(data, &ks, &settings.kmeans).map_err(at(err))?;
    let dbscan = dbscan(data, &settings.dbscan).map_err(at(err))?;
    let k = settings.dbscan.min_samples.saturating_sub(1).max(1);
    let k_distance = sampled_k_distance(data, k, settings.k_distance_sample, seed)?;
    let (pca, projection) = pca_project(data).map_err(at(err))?;
    Ok(ClusterOutput { kmeans, silhouette, elbow, dbscan, k_distance, pca, projection })
}

// ---------------------------------------------------------------------- risk

pub struct RiskOutput {
    pub table: RiskTable,
    pub cardholders: Vec<EntityRisk>,
    pub merchants: Vec<EntityRisk>,
    pub windows: Vec<TimeWindowStats>,
    pub correlations: [[f64; 8]; 8],
}

pub fn assess_risk(
    cfg: &risk::RiskConfig,
    txns: &[CleanTransaction],
    fs: &FeatureSet,
    scores: &DetectorScores,
) -> Result<RiskOutput, PipelineError> {
    let err = Stage::Risk;
    let (mut flags, high_cut) = risk::behavioral_flags(txns, &fs.features, &fs.stats, &cfg.thresholds).map_err(at(err))?;
    risk::merge_detector_flags(&mut flags, &scores.if_flag, &scores.ocsvm_flag, &scores.ae_flag).map_err(at(err))?;
    let table = risk::score_corpus(txns, &flags, high_cut, cfg).map_err(at(err))?;
    let ratio = cfg.thresholds.entity_ratio;
    let cardholders = risk::entity_risk(&table, GroupBy::Cardholder, ratio);
    let merchants = risk::entity_risk(&table, GroupBy::Merchant, ratio);
    let ts: Vec<i64> = table.rows.iter().map(|r| r.timestamp_ms).collect();
    let composite: Vec<f64> = table.rows.iter().map(|r| f64::from(r.composite)).collect();
    let windows = risk::time_window_risk(&ts, &composite);
    let arrays: Vec<[bool; 8]> = flags.iter().map(IndicatorFlags::as_array).collect();
    let correlations = risk::indicator_correlations(&arrays);
    Ok(RiskOutput { table, cardholders, merchants, windows, correlations })
}

pub fn write_risk(dir: &Path, out: &RiskOutput) -> Result<(), PipelineError> {
    let err = Stage::Risk;
    std::fs::create_dir_all(dir).map_err(at(err))?;
    let file = |name: &str| create(&dir.join(name)).map_err(at(err));
    risk::write_risk_csv(file("risk.csv")?, &out.table).map_err(at(err))?;
    risk::write_entity_csv(file("cardholders.csv")?, &out.cardholders).map_err(at(err))?;
    risk::write_entity_csv(file("merchants.csv")?, &out.merchants).map_err(at(err))?;
    risk::write_window_csv(file("time_windows.csv")?, &out.windows).map_err(at(err))?;
    risk::write_correlation_csv(file("correlations.csv")?, &out.correlations).map_err(at(err))?;
    let mut w = csv::Writer::from_writer(file("review_queue.csv")?);
    w.write_record(["rank", "txn_id", "card_id", "weighted", "composite", "high_risk"]).map_err(at(err))?;
    for (rank, i) in risk::review_queue(&out.table).into_iter().enumerate() {
        let r = &out.table.rows[i];
        w.write_record([
            (rank + 1).to_string(),
            r.txn_id.clone(),
            r.card_id.clone(),
            r.weighted.to_string(),
            r.composite.to_string(),
            u8::from(r.high_risk).to_string(),
        ])
        .map_err(at(err))?;
    }
    w.flush().map_err(at(err))
}

// ----------------------------------------------------------------------- arf

/// One context per configured region. Volatility is the mean, over merchant
/// categories seen in the region, of the clipped daily-count variation.
pub fn region_contexts(settings: &ArfSettings, txns: &[CleanTransaction]) -> Vec<ArfContext> {
    let mut days: BTreeMap<&str, BTreeMap<&str, Vec<i64>>> = BTreeMap::new();
    for t in txns {
        days.entry(t.region.as_str())
            .or_default()
            .entry(t.category_label.as_str())
            .or_default()
            .push(t.timestamp_ms.div_euclid(DAY_MS));
    }
    settings
        .regions
        .iter()
        .map(|(name, policy)| {
            let volatility = days.get(name.as_str()).map_or(0.0, |cats| {
                cats.values().map(|d| arf::volatility(d)).sum::<f64>() / cats.len() as f64
            });
            ArfContext {
                region_group: name.clone(),
                prior: policy.prior,
                volatility,
                legal_weight: policy.legal_weight,
            }
        })
        .collect()
}

/// Stream items in arrival order (timestamp, then source position).
pub fn arf_stream_items(
    settings: &ArfSettings,
    txns: &[CleanTransaction],
    fs: &FeatureSet,
    scores: &DetectorScores,
    labels: Option<&[Typology]>,
) -> Vec<StreamItem> {
    let mut order: Vec<usize> = (0..txns.len()).collect();
    order.sort_by_key(|&i| (txns[i].timestamp_ms, txns[i].seq));
    order
        .into_iter()
        .map(|i| {
            let t = &txns[i];
            let f = &fs.features[i];
            let stats = &fs.stats[&t.card_id];
            let features = arf::build_features(
                [scores.if_flag[i], scores.ocsvm_flag[i], scores.ae_flag[i]],
                t.amount(),
                stats,
                f.seconds_since_last,
                &settings.engine,
            );
            let label = if settings.use_labels { labels.map(|l| u8::from(l[i] != Typology::None)) } else { None };
            StreamItem {
                txn_id: t.txn_id.clone(),
                timestamp_ms: t.timestamp_ms,
                group: t.region.clone(),
                features,
                seconds_since_last: f.seconds_since_last,
                label,
            }
        })
        .collect()
}

pub struct ArfOutput {
    pub decisions: Vec<Decision>,
    pub engine: ArfEngine,
}

pub fn run_arf(settings: &ArfSettings, contexts: &[ArfContext], items: &[StreamItem]) -> Result<ArfOutput, PipelineError> {
    let mut engine = ArfEngine::new(settings.engine.clone(), contexts).map_err(at(Stage::Arf))?;
    let decisions: Vec<Decision> = items.iter().map(|item| engine.process(item)).collect();
    engine.flush(items.last().map_or(0, |i| i.timestamp_ms));
    Ok(ArfOutput { decisions, engine })
}

fn write_arf(dir: &Path, out: &ArfOutput, contexts: &[ArfContext]) -> Result<(), PipelineError> {
    let err = Stage::Arf;
    let mut w = create(&dir.join("decisions.jsonl")).map_err(at(err))?;
    for d in &out.decisions {
        serde_json::to_writer(&mut w, d).map_err(at(err))?;
        w.write_all(b"\n").map_err(at(err))?;
    }
    w.flush().map_err(at(err))?;
    let mut w = create(&dir.join("audit.jsonl")).map_err(at(err))?;
    out.engine.write_audit_jsonl(&mut w).map_err(at(err))?;
    w.flush().map_err(at(err))?;
    let weights: Vec<&arf::ArfWeights> = out.engine.all_weights().collect();
    write_json(&dir.join("weights.json"), &weights).map_err(at(err))?;
    write_json(&dir.join("contexts.json"), &contexts).map_err(at(err))
}

// ---------------------------------------------------------------------- eval

pub const SUBSET_ALL: &str = "all_planted";
pub const SUBSET_THRESHOLD: &str = "threshold_typologies";

/// Detector, composite and review-queue rows on two subsets: every planted
/// row against normals, and threshold-defined typologies against normals
/// (other planted rows left out).
pub fn evaluate(
    seed: u64,
    typologies: &[Typology],
    scores: &DetectorScores,
    table: &RiskTable,
) -> Result<EvalReport, PipelineError> {
    let ocsvm = scores.ocsvm_anomaly();
    let composite: Vec<f64> = table.rows.iter().map(|r| f64::from(r.composite)).collect();
    let weighted: Vec<f64> = table.rows.iter().map(|r| r.weighted).collect();
    let high_risk: Vec<bool> = table.rows.iter().map(|r| r.high_risk).collect();
    let queue: Vec<bool> = table.rows.iter().map(|r| r.needs_review()).collect();
    let columns: [(&str, &[bool], &[f64]); 5] = [
        ("iforest", &scores.if_flag, &scores.if_score),
        ("ocsvm", &scores.ocsvm_flag, &ocsvm),
        ("autoencoder", &scores.ae_flag, &scores.ae_error),
        ("composite", &high_risk, &composite),
        ("combined", &queue, &weighted),
    ];
    let mut rows = Vec::new();
    for subset in [SUBSET_ALL, SUBSET_THRESHOLD] {
        let keep: Vec<usize> = (0..typologies.len())
            .filter(|&i| {
                subset == SUBSET_ALL
                    || typologies[i] == Typology::None
                    || Typology::THRESHOLD_DEFINED.contains(&typologies[i])
            })
            .collect();
        let labels: Vec<bool> = keep.iter().map(|&i| typologies[i] != Typology::None).collect();
        for (name, flags, s) in columns {
            let f: Vec<bool> = keep.iter().map(|&i| flags[i]).collect();
            let s: Vec<f64> = keep.iter().map(|&i| s[i]).collect();
            rows.push(metrics(name, subset, &labels, &f, &s).map_err(at(Stage::Eval))?);
        }
    }
    Ok(EvalReport { seed, rows })
}

// --------------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub detector: String,
    pub eval: Option<EvalRow>,
    pub flag_rate: f64,
    pub dbscan_clusters: Option<usize>,
    pub dbscan_noise_fraction: Option<f64>,
}

pub fn run_sweep(
    cfg: &PipelineConfig,
    data: &Matrix,
    typologies: Option<&[Typology]>,
) -> Result<Vec<SweepRow>, PipelineError> {
    let err = Stage::Sweep;
    let labels: Option<Vec<bool>> = typologies.map(|t| t.iter().map(|&x| x != Typology::None).collect());
    let rate = |f: &[bool]| f.iter().filter(|&&b| b).count() as f64 / f.len().max(1) as f64;
    let eval = |name: &str, flags: &[bool], scores: &[f64]| -> Result<Option<EvalRow>, PipelineError> {
        labels.as_ref().map(|l| metrics(name, SUBSET_ALL, l, flags, scores).map_err(at(Stage::Sweep))).transpose()
    };
    let mut rows = Vec::new();
    for &c in &cfg.sweep.contamination {
        let model = IsolationForestModel::fit(data, &IforestConfig { contamination: c, ..cfg.iforest.clone() }).map_err(at(err))?;
        let s = model.score_matrix(data).map_err(at(err))?;
        let f = model.flag_training(&s);
        rows.push(SweepRow {
            parameter: "contamination".into(),
            value: c,
            detector: "iforest".into(),
            eval: eval("iforest", &f, &s)?,
            flag_rate: rate(&f),
            dbscan_clusters: None,
            dbscan_noise_fraction: None,
        });
    }
    for &nu in &cfg.sweep.nu {
        let model = OcsvmModel::fit(data, &OcsvmConfig { nu, ..cfg.ocsvm.clone() }).map_err(at(err))?;
        let d = model.decision_matrix(data).map_err(at(err))?;
        let f = OcsvmModel::flag(&d);
        let s: Vec<f64> = d.iter().map(|x| -x).collect();
        rows.push(SweepRow {
            parameter: "nu".into(),
            value: nu,
            detector: "ocsvm".into(),
            eval: eval("ocsvm", &f, &s)?,
            flag_rate: rate(&f),
            dbscan_clusters: None,
            dbscan_noise_fraction: None,
        });
    }
    for &eps in &cfg.sweep.eps {
        let result = dbscan(data, &DbscanConfig { eps, ..cfg.cluster.dbscan.clone() }).map_err(at(err))?;
        rows.push(SweepRow {
            parameter: "eps".into(),
            value: eps,
            detector: "dbscan".into(),
            eval: None,
            flag_rate: result.noise_fraction(),
            dbscan_clusters: Some(result.n_clusters),
            dbscan_noise_fraction: Some(result.noise_fraction()),
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "parameter",
        "value",
        "detector",
        "flag_rate",
        "detection_rate",
        "false_positive_rate",
        "precision",
        "auc_roc",
        "dbscan_clusters",
        "dbscan_noise_fraction",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.parameter.clone(),
            r.value.to_string(),
            r.detector.clone(),
            r.flag_rate.to_string(),
            opt(r.eval.as_ref().map(|e| e.detection_rate)),
            opt(r.eval.as_ref().map(|e| e.false_positive_rate)),
            opt(r.eval.as_ref().map(|e| e.precision)),
            opt(r.eval.as_ref().map(|e| e.auc_roc)),
            r.dbscan_clusters.map_or(String::new(), |c| c.to_string()),
            opt(r.dbscan_noise_fraction),
        ])?;
    }
    w.flush()
}

// ------------------------------------------------------------------ pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub rows: usize,
    pub ingest: IngestReport,
    pub iforest_flag_rate: f64,
    pub ocsvm_flag_rate: f64,
    pub autoencoder_flag_rate: f64,
    pub ocsvm_support_vectors: usize,
    pub autoencoder_best_epoch: usize,
    pub queue_fraction: f64,
    pub cluster: ClusterSummary,
    pub arf_updates: u64,
}

pub struct PipelineRun {
    pub layout: Layout,
    pub summary: RunSummary,
    pub eval: Option<EvalReport>,
    pub sweep: Vec<SweepRow>,
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Lists every file under the run directory with its size and digest.
pub fn write_manifest(layout: &Layout, seed: u64) -> std::io::Result<()> {
    let mut files = Vec::new();
    collect_files(&layout.root, &mut files)?;
    let manifest_path = layout.manifest();
    let mut entries: Vec<ManifestEntry> = files
        .into_iter()
        .filter(|p| *p != manifest_path)
        .map(|p| {
            let bytes = std::fs::read(&p)?;
            let rel = p.strip_prefix(&layout.root).expect("inside root").to_string_lossy().replace('\\', "/");
            Ok(ManifestEntry { path: rel, bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) })
        })
        .collect::<std::io::Result<_>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    #[derive(Serialize)]
    struct Manifest {
        seed: u64,
        config: &'static str,
        files: Vec<ManifestEntry>,
    }
    write_json(&manifest_path, &Manifest { seed, config: "config.toml", files: entries })
}

fn fraction(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&b| b).count() as f64 / flags.len().max(1) as f64
}

/// gen → ingest → features → train → score → cluster → risk → arf → eval → report.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun, PipelineError> {
    cfg.validate().map_err(at(Stage::Config))?;
    let layout = Layout::new(&cfg.paths.out_dir);
    std::fs::create_dir_all(&layout.root).map_err(at(Stage::Config))?;
    std::fs::write(layout.config_echo(), cfg.to_toml_string()).map_err(at(Stage::Config))?;

    let input = match &cfg.paths.input_dir {
        Some(dir) => dir.clone(),
        None => {
            let corpus = generate_corpus(cfg)?;
            corpus.write(&layout.data_dir()).map_err(at(Stage::Gen))?;
            layout.data_dir()
        }
    };

    let dataset = ingest_dir(&input, &clean_options(cfg))?;
    ingest::write_clean_csv(&layout.clean_csv(), &dataset.txns).map_err(at(Stage::Ingest))?;
    write_json(&layout.root.join("ingest_report.json"), &dataset.report).map_err(at(Stage::Ingest))?;
    let txns = &dataset.txns;
    let typologies = dataset.typologies();

    let fs = derive_features(txns)?;
    features::write_feature_csv(&layout.features_csv(), txns, &fs.features, &fs.matrix).map_err(at(Stage::Features))?;

    let det = train_detectors(cfg, &fs.matrix.data)?;
    save_models(&layout, &fs, &det)?;

    let scores = score_detectors(&det, &fs.matrix.data, true)?;
    scores.write_csv(&layout.scores_csv(), txns).map_err(at(Stage::Score))?;

    let clusters = cluster_features(&cfg.cluster, cfg.seed, &fs.matrix.data)?;
    persist::save(&layout.model("kmeans"), &clusters.kmeans).map_err(at(Stage::Cluster))?;
    persist::save(&layout.model("pca"), &clusters.pca).map_err(at(Stage::Cluster))?;
    let cluster_summary = clusters.summary();
    write_json(&layout.cluster_dir().join("summary.json"), &cluster_summary).map_err(at(Stage::Cluster))?;

    let risk_out = assess_risk(&cfg.risk, txns, &fs, &scores)?;
    write_risk(&layout.risk_dir(), &risk_out)?;

    let contexts = region_contexts(&cfg.arf, txns);
    let items = arf_stream_items(&cfg.arf, txns, &fs, &scores, typologies.as_deref());
    let arf_out = run_arf(&cfg.arf, &contexts, &items)?;
    write_arf(&layout.arf_dir(), &arf_out, &contexts)?;

    let eval = match &typologies {
        Some(t) => {
            let report = evaluate(cfg.seed, t, &scores, &risk_out.table)?;
            report.write_csv(create(&layout.eval_csv()).map_err(at(Stage::Eval))?).map_err(at(Stage::Eval))?;
            write_json(&layout.eval_json(), &report).map_err(at(Stage::Eval))?;
            Some(report)
        }
        None => None,
    };

    let ocsvm_anomaly = scores.ocsvm_anomaly();
    let inputs = ReportInputs {
        txns,
        detector_scores: [
            ("iforest", &scores.if_score, &scores.if_flag),
            ("ocsvm", &ocsvm_anomaly, &scores.ocsvm_flag),
            ("autoencoder", &scores.ae_error, &scores.ae_flag),
        ],
        projection: &clusters.projection,
        kmeans_labels: &clusters.kmeans.labels,
        dbscan_labels: &clusters.dbscan.labels,
        elbow: &clusters.elbow,
        k_distance: &clusters.k_distance,
        risk: &risk_out.table,
        cardholders: &risk_out.cardholders,
        merchants: &risk_out.merchants,
        windows: &risk_out.windows,
        correlations: &risk_out.correlations,
        history: &det.history,
    };
    render_reports(&layout.report_dir(), &inputs, cfg.render_svg).map_err(at(Stage::Report))?;

    let sweep = run_sweep(cfg, &fs.matrix.data, typologies.as_deref())?;
    if !sweep.is_empty() {
        write_sweep_csv(&layout.sweep_csv(), &sweep).map_err(at(Stage::Sweep))?;
    }

    let summary = RunSummary {
        seed: cfg.seed,
        rows: txns.len(),
        ingest: dataset.report,
        iforest_flag_rate: fraction(&scores.if_flag),
        ocsvm_flag_rate: fraction(&scores.ocsvm_flag),
        autoencoder_flag_rate: fraction(&scores.ae_flag),
        ocsvm_support_vectors: det.ocsvm.support_vectors.rows(),
        autoencoder_best_epoch: det.history.best_epoch,
        queue_fraction: risk::queue_fraction(&risk_out.table),
        cluster: cluster_summary,
        arf_updates: arf_out.engine.all_weights().map(|w| w.update_count).sum(),
    };
    write_json(&layout.root.join("summary.json"), &summary).map_err(at(Stage::Report))?;
    write_manifest(&layout, cfg.seed).map_err(at(Stage::Report))?;
    Ok(PipelineRun { layout, summary, eval, sweep })
}

/// The detection-relevant part of the pipeline, entirely in memory.
pub struct DetectionRun {
    pub dataset: Dataset,
    pub features: FeatureSet,
    pub detectors: Detectors,
    pub scores: DetectorScores,
    pub risk: RiskOutput,
    pub eval: EvalReport,
}

pub fn run_detection(cfg: &PipelineConfig) -> Result<DetectionRun, PipelineError> {
    cfg.validate().map_err(at(Stage::Config))?;
    let corpus = generate_corpus(cfg)?;
    let dataset = ingest_corpus(&corpus, &clean_options(cfg))?;
    let fs = derive_features(&dataset.txns)?;
    let det = train_detectors(cfg, &fs.matrix.data)?;
    let scores = score_detectors(&det, &fs.matrix.data, true)?;
    let risk_out = assess_risk(&cfg.risk, &dataset.txns, &fs, &scores)?;
    let typologies = dataset.typologies().expect("generated corpus is labelled");
    let eval = evaluate(cfg.seed, &typologies, &scores, &risk_out.table)?;
    Ok(DetectionRun { dataset, features: fs, detectors: det, scores, risk: risk_out, eval })
}
