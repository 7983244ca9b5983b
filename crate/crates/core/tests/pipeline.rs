use std::path::Path;

use fraudlab_core::harness::config::PipelineConfig;
use fraudlab_core::harness::pipeline::{load_models, score_detectors, derive_features_with, Layout, Stage};
use fraudlab_core::harness::{persist, run_pipeline};
use fraudlab_core::iforest::IsolationForestModel;
use fraudlab_core::ingest::read_clean_csv;

fn small(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.paths.out_dir = out.to_path_buf();
    cfg.generator.n_transactions = 6_000;
    cfg.autoencoder.max_epochs = 4;
    cfg.cluster.elbow_max_k = 4;
    cfg.cluster.kmeans.n_init = 3;
    cfg.cluster.k_distance_sample = 800;
    cfg.ocsvm.subsample_cap = Some(2_000);
    cfg
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn two_runs_write_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(&small(a.path())).unwrap();
    let rb = run_pipeline(&small(b.path())).unwrap();
    assert_eq!(ra.eval, rb.eval);
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names: Vec<&String> = ta.iter().map(|f| &f.0).collect();
    assert_eq!(names, tb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in ta.iter().zip(&tb) {
        // The echoed config names its own output directory.
        if name != "config.toml" && name != "manifest.json" {
            assert!(x == y, "{name} differs");
        }
    }
    for required in ["eval.csv", "models/iforest.json", "report/elbow.svg", "arf/audit.jsonl", "risk/review_queue.csv"] {
        assert!(names.iter().any(|n| n.as_str() == required), "missing {required}");
    }
}

#[test]
fn stored_models_reproduce_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    run_pipeline(&cfg).unwrap();
    let layout = Layout::new(dir.path());
    let txns = read_clean_csv(&layout.clean_csv()).unwrap();
    let (params, det) = load_models(&layout).unwrap();
    let fs = derive_features_with(&txns, &params).unwrap();
    let scores = score_detectors(&det, &fs.matrix.data, true).unwrap();
    let mut rdr = csv::Reader::from_path(layout.scores_csv()).unwrap();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        assert_eq!(rec[1].parse::<f64>().unwrap().to_bits(), scores.if_score[i].to_bits());
        assert_eq!(rec[3].parse::<f64>().unwrap().to_bits(), scores.ocsvm_decision[i].to_bits());
        assert_eq!(rec[5].parse::<f64>().unwrap().to_bits(), scores.ae_error[i].to_bits());
    }
    let forest: IsolationForestModel = persist::load(&layout.model("iforest")).unwrap();
    assert_eq!(forest, det.iforest);
}

#[test]
fn missing_input_aborts_in_ingest() {
    let out = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    let mut cfg = small(out.path());
    cfg.paths.input_dir = Some(empty.path().to_path_buf());
    let err = run_pipeline(&cfg).err().expect("must fail");
    assert_eq!(err.stage, Stage::Ingest);
    assert!(err.to_string().starts_with("stage `ingest` failed"), "{err}");
}

#[test]
fn contamination_sweep_gives_one_row_each() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.sweep.contamination = vec![0.005, 0.01, 0.02];
    cfg.render_svg = false;
    let run = run_pipeline(&cfg).unwrap();
    assert_eq!(run.sweep.len(), 3);
    for (row, c) in run.sweep.iter().zip([0.005, 0.01, 0.02]) {
        assert_eq!(row.parameter, "contamination");
        assert!((row.flag_rate - c).abs() < 1e-3, "{} vs {c}", row.flag_rate);
        let e = row.eval.as_ref().unwrap();
        assert_eq!(e.tp + e.fp + e.tn + e.fn_, e.n);
    }
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn eval_rows_reconcile() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_pipeline(&small(dir.path())).unwrap();
    let eval = run.eval.unwrap();
    assert_eq!(eval.rows.len(), 10);
    for r in &eval.rows {
        assert_eq!(r.tp + r.fp + r.tn + r.fn_, r.n);
        for v in [r.detection_rate, r.false_positive_rate, r.precision, r.auc_roc] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let all = eval.row("iforest", "all_planted").unwrap();
    assert_eq!(all.tp + all.fn_, 90);
}

#[test]
fn emitted_files_reload() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&small(dir.path())).unwrap();
    let layout = Layout::new(dir.path());
    let echoed = PipelineConfig::load(&layout.config_echo()).unwrap();
    assert_eq!(echoed, small(dir.path()));
    assert!(fraudlab_core::features::read_feature_csv(&layout.features_csv()).unwrap().len() == 6_000);
    for entry in std::fs::read_dir(layout.report_dir()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "svg") {
            roxmltree::Document::parse(&std::fs::read_to_string(&p).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        } else {
            let mut rdr = csv::Reader::from_path(&p).unwrap();
            assert!(rdr.records().all(|r| r.is_ok()), "{}", p.display());
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(layout.manifest()).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert!(manifest["files"].as_array().unwrap().len() > 30);
}
