use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use fraudlab_core::arf::{ArfContext, ArfEngine, StreamItem, WEIGHT_NAMES};
use fraudlab_core::features;
use fraudlab_core::harness::config::PipelineConfig;
use fraudlab_core::harness::pipeline::{
    self, assess_risk, cluster_features, derive_features, derive_features_with, evaluate, ingest_dir, load_models,
    read_history, run_sweep, save_models, score_detectors, train_detectors, write_json, write_risk, write_sweep_csv,
    Dataset, DetectorScores, FeatureSet, Layout,
};
use fraudlab_core::harness::persist;
use fraudlab_core::harness::report::{render_reports, ReportInputs};
use fraudlab_core::ingest::{self, CleanTransaction};
use fraudlab_core::synthgen::{self, Typology};

#[derive(Parser)]
#[command(name = "fraudlab", version, about = "Unsupervised card-fraud detection toolkit")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (FRAUDLAB_OUT takes precedence).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus into <out>/data.
    Gen {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Join and clean the four input tables into <out>/clean.csv.
    Ingest {
        /// Directory with the input tables (defaults to <out>/data).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Derive engineered features and the standardization.
    Features,
    /// Fit the isolation forest, one-class SVM and autoencoder.
    Train,
    /// Score cleaned transactions with the stored models.
    Score,
    /// K-Means, DBSCAN and PCA over the feature matrix.
    Cluster,
    /// Behavioral indicators, composite scores and rankings.
    Risk,
    /// Score JSON-lines transactions from stdin with adaptive weights.
    ArfStream {
        /// Contexts JSON written by a previous run.
        #[arg(long)]
        contexts: Option<PathBuf>,
        /// Where to write the weight audit log.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Compare detector output with labels.csv.
    Eval {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write CSV summaries and SVG charts.
    Report,
    /// Re-run detectors across the configured parameter grids.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        contamination: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        nu: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
    },
    /// Every stage end to end.
    Run,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    cfg.apply_env();
    cfg.validate()?;
    Ok(cfg)
}

fn input_dir(cfg: &PipelineConfig, layout: &Layout, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().or_else(|| cfg.paths.input_dir.clone()).unwrap_or_else(|| layout.data_dir())
}

fn read_clean(layout: &Layout) -> Result<Vec<CleanTransaction>> {
    let path = layout.clean_csv();
    ingest::read_clean_csv(&path).with_context(|| format!("reading {} (run `fraudlab ingest` first)", path.display()))
}

struct Scored {
    txns: Vec<CleanTransaction>,
    features: FeatureSet,
    scores: DetectorScores,
}

fn scored(layout: &Layout) -> Result<Scored> {
    let txns = read_clean(layout)?;
    let (params, detectors) = load_models(layout).context("loading models (run `fraudlab train` first)")?;
    let features = derive_features_with(&txns, &params)?;
    let scores = score_detectors(&detectors, &features.matrix.data, false)?;
    Ok(Scored { txns, features, scores })
}

fn labels_for(dir: &Path, txns: &[CleanTransaction]) -> Result<Vec<Typology>> {
    let path = dir.join("labels.csv");
    let labels = synthgen::read_labels(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(txns.iter().map(|t| labels.get(&t.txn_id).map_or(Typology::None, |l| l.typology)).collect())
}

const FEATURE_NAMES: [&str; 5] = ["f_if", "f_ocsvm", "f_ae", "delta_spend", "delta_time"];

#[derive(Serialize)]
struct ScoreLine<'a> {
    txn_id: &'a str,
    group: &'a str,
    #[serde(rename = "R")]
    r: f64,
    tau: Option<f64>,
    high_risk: bool,
    update_count: u64,
    weights: BTreeMap<&'static str, f64>,
    contributions: BTreeMap<&'static str, f64>,
}

fn arf_stream(cfg: &PipelineConfig, contexts: Option<&Path>, audit: Option<&Path>) -> Result<()> {
    let contexts: Vec<ArfContext> = match contexts {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => pipeline::region_contexts(&cfg.arf, &[]),
    };
    let mut engine = ArfEngine::new(cfg.arf.engine.clone(), &contexts)?;
    let stdin = std::io::stdin();
    let mut out = BufWriter::new(std::io::stdout().lock());
    let mut last_ts = 0;
    for (n, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: StreamItem = serde_json::from_str(&line).with_context(|| format!("stdin line {}", n + 1))?;
        last_ts = item.timestamp_ms;
        let d = engine.process(&item);
        let f = item.features.as_array();
        let line = ScoreLine {
            txn_id: &d.txn_id,
            group: &d.group,
            r: d.score,
            tau: d.tau,
            high_risk: d.high_risk,
            update_count: d.update_count,
            weights: WEIGHT_NAMES.iter().copied().zip(d.weights).collect(),
            contributions: FEATURE_NAMES.iter().enumerate().map(|(i, &k)| (k, d.weights[i] * f[i])).collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    engine.flush(last_ts);
    if let Some(path) = audit {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        engine.write_audit_jsonl(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let layout = Layout::new(&cfg.paths.out_dir);
    match &cli.command {
        Command::Gen { n } => {
            let mut gen_cfg = cfg.generator.clone();
            if let Some(n) = n {
                gen_cfg.n_transactions = *n;
            }
            let corpus = synthgen::generate_labeled(&gen_cfg)?;
            corpus.write(&layout.data_dir())?;
            eprintln!("wrote {} transactions ({} planted) to {}", corpus.rows.len(), corpus.planted(), layout.data_dir().display());
        }
        Command::Ingest { input } => {
            let dir = input_dir(&cfg, &layout, input);
            let Dataset { txns, report, .. } = ingest_dir(&dir, &pipeline::clean_options(&cfg))?;
            ingest::write_clean_csv(&layout.clean_csv(), &txns)?;
            write_json(&layout.root.join("ingest_report.json"), &report)?;
            eprintln!("{} rows in, {} out, {} capped, {} suspect timestamps", report.rows_in, report.rows_out, report.capped, report.suspect_timestamps);
        }
        Command::Features => {
            let txns = read_clean(&layout)?;
            let fs = derive_features(&txns)?;
            features::write_feature_csv(&layout.features_csv(), &txns, &fs.features, &fs.matrix)?;
            persist::save(&layout.model("standardization"), &fs.matrix.params)?;
            eprintln!("wrote {}", layout.features_csv().display());
        }
        Command::Train => {
            let txns = read_clean(&layout)?;
            let fs = derive_features(&txns)?;
            let det = train_detectors(&cfg, &fs.matrix.data)?;
            save_models(&layout, &fs, &det)?;
            eprintln!(
                "isolation forest threshold {:.4}, {} support vectors, autoencoder threshold {:.4} (best epoch {})",
                det.iforest.score_threshold,
                det.ocsvm.support_vectors.rows(),
                det.autoencoder.threshold,
                det.history.best_epoch
            );
        }
        Command::Score => {
            let s = scored(&layout)?;
            s.scores.write_csv(&layout.scores_csv(), &s.txns)?;
            eprintln!("wrote {}", layout.scores_csv().display());
        }
        Command::Cluster => {
            let txns = read_clean(&layout)?;
            let fs = derive_features(&txns)?;
            let c = cluster_features(&cfg.cluster, cfg.seed, &fs.matrix.data)?;
            persist::save(&layout.model("kmeans"), &c.kmeans)?;
            persist::save(&layout.model("pca"), &c.pca)?;
            let summary = c.summary();
            write_json(&layout.cluster_dir().join("summary.json"), &summary)?;
            eprintln!(
                "silhouette {:.3}, DBSCAN {} clusters with {:.2}% noise",
                summary.silhouette,
                summary.dbscan_clusters,
                100.0 * summary.dbscan_noise_fraction
            );
        }
        Command::Risk => {
            let s = scored(&layout)?;
            let r = assess_risk(&cfg.risk, &s.txns, &s.features, &s.scores)?;
            write_risk(&layout.risk_dir(), &r)?;
            eprintln!("review queue holds {:.2}% of transactions", 100.0 * fraudlab_core::risk::queue_fraction(&r.table));
        }
        Command::ArfStream { contexts, audit } => arf_stream(&cfg, contexts.as_deref(), audit.as_deref())?,
        Command::Eval { input } => {
            let s = scored(&layout)?;
            let typologies = labels_for(&input_dir(&cfg, &layout, input), &s.txns)?;
            let r = assess_risk(&cfg.risk, &s.txns, &s.features, &s.scores)?;
            let report = evaluate(cfg.seed, &typologies, &s.scores, &r.table)?;
            report.write_csv(std::fs::File::create(layout.eval_csv())?)?;
            write_json(&layout.eval_json(), &report)?;
            let mut stdout = std::io::stdout().lock();
            report.write_csv(&mut stdout)?;
        }
        Command::Report => {
            let s = scored(&layout)?;
            let c = cluster_features(&cfg.cluster, cfg.seed, &s.features.matrix.data)?;
            let r = assess_risk(&cfg.risk, &s.txns, &s.features, &s.scores)?;
            let history = read_history(&layout).unwrap_or_default();
            let ocsvm = s.scores.ocsvm_anomaly();
            let inputs = ReportInputs {
                txns: &s.txns,
                detector_scores: [
                    ("iforest", &s.scores.if_score, &s.scores.if_flag),
                    ("ocsvm", &ocsvm, &s.scores.ocsvm_flag),
                    ("autoencoder", &s.scores.ae_error, &s.scores.ae_flag),
                ],
                projection: &c.projection,
                kmeans_labels: &c.kmeans.labels,
                dbscan_labels: &c.dbscan.labels,
                elbow: &c.elbow,
                k_distance: &c.k_distance,
                risk: &r.table,
                cardholders: &r.cardholders,
                merchants: &r.merchants,
                windows: &r.windows,
                correlations: &r.correlations,
                history: &history,
            };
            render_reports(&layout.report_dir(), &inputs, cfg.render_svg)?;
            eprintln!("wrote reports to {}", layout.report_dir().display());
        }
        Command::Sweep { contamination, nu, eps } => {
            let mut cfg = cfg.clone();
            if !contamination.is_empty() || !nu.is_empty() || !eps.is_empty() {
                cfg.sweep.contamination = contamination.clone();
                cfg.sweep.nu = nu.clone();
                cfg.sweep.eps = eps.clone();
            }
            cfg.validate()?;
            if cfg.sweep.contamination.is_empty() && cfg.sweep.nu.is_empty() && cfg.sweep.eps.is_empty() {
                bail!("nothing to sweep: pass --contamination, --nu or --eps, or set [sweep] in the config");
            }
            let txns = read_clean(&layout)?;
            let fs = derive_features(&txns)?;
            let labels = labels_for(&input_dir(&cfg, &layout, &None), &txns).ok();
            let rows = run_sweep(&cfg, &fs.matrix.data, labels.as_deref())?;
            write_sweep_csv(&layout.sweep_csv(), &rows)?;
            eprintln!("wrote {} sweep rows to {}", rows.len(), layout.sweep_csv().display());
        }
        Command::Run => {
            let run = pipeline::run_pipeline(&cfg)?;
            let s = &run.summary;
            eprintln!(
                "{} rows; flag rates IF {:.2}% OCSVM {:.2}% AE {:.2}%; queue {:.2}%; silhouette {:.3}; DBSCAN noise {:.2}%",
                s.rows,
                100.0 * s.iforest_flag_rate,
                100.0 * s.ocsvm_flag_rate,
                100.0 * s.autoencoder_flag_rate,
                100.0 * s.queue_fraction,
                s.cluster.silhouette,
                100.0 * s.cluster.dbscan_noise_fraction
            );
            if let Some(eval) = &run.eval {
                let mut stdout = std::io::stdout().lock();
                eval.write_csv(&mut stdout)?;
            }
        }
    }
    Ok(())
}
