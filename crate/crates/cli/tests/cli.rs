use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SMALL: &str = r#"
seed = 11
[generator]
n_transactions = 5000
[autoencoder]
max_epochs = 3
[cluster]
elbow_max_k = 3
k_distance_sample = 500
"#;

fn fraudlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fraudlab"))
        .current_dir(dir)
        .env_remove("FRAUDLAB_OUT")
        .env("RUST_BACKTRACE", "0")
        .args(["--config", "small.toml", "--out", "out"])
        .args(args)
        .output()
        .expect("spawn fraudlab")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = fraudlab(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn staged_commands_produce_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("small.toml"), SMALL).unwrap();

    let err = fraudlab(dir, &["train"]);
    assert!(!err.status.success());
    assert!(String::from_utf8_lossy(&err.stderr).contains("ingest"));

    for cmd in ["gen", "ingest", "features", "train", "score", "cluster", "risk"] {
        ok(dir, &[cmd]);
    }
    let eval = ok(dir, &["eval"]);
    let text = String::from_utf8(eval.stdout).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("detector,subset,"));
    ok(dir, &["report"]);
    ok(dir, &["sweep", "--nu", "0.005,0.02"]);

    let out = dir.join("out");
    for f in [
        "clean.csv",
        "features.csv",
        "scores.csv",
        "eval.csv",
        "sweep.csv",
        "models/iforest.json",
        "models/autoencoder.json",
        "risk/risk.csv",
        "cluster/summary.json",
        "report/elbow.svg",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn arf_stream_scores_stdin() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_fraudlab"))
        .current_dir(tmp.path())
        .args(["--config", "small.toml", "arf-stream"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        for i in 0..40 {
            let f_if = u8::from(i % 4 == 0);
            let spend = if f_if == 1 { 4.0 } else { 0.2 };
            writeln!(
                stdin,
                r#"{{"txn_id":"t{i}","timestamp_ms":{},"group":"rural","features":{{"f_if":{f_if},"f_ocsvm":0,"f_ae":{f_if},"delta_spend":{spend},"delta_time":0.1}},"seconds_since_last":600}}"#,
                i * 1000
            )
            .unwrap();
        }
    }
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 40);
    let first = &lines[0];
    assert_eq!(first["group"], "rural");
    let r = first["R"].as_f64().unwrap();
    let sum: f64 = first["contributions"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
    assert!((r - sum).abs() < 1e-12);
    assert_eq!(first["high_risk"], true);
    assert!(lines.iter().any(|l| l["update_count"].as_u64().unwrap() > 0));
}

#[test]
fn bad_config_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.toml"), "[generator]\nbogus = 1\n").unwrap();
    let out = fraudlab(tmp.path(), &["gen"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
