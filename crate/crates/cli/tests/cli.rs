use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sissa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sissa"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("SISSA_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "\
dataset:
  pipeline:
    window: 32
    block_len: 256
    windows_per_class: 10
train:
  model:
    variant: C
    mapped: 24
    hidden: 16
    conv_channels: [4, 4]
  optim:
    max_epochs: 2
    batch_size: 16
eval:
  grouped: true
bench:
  warmup: 100
  repetitions: 20
";

#[test]
fn generate_is_reproducible_and_snapshots_config() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = sissa(d.path(), &["generate", "--seed", "4", "--override", "generate.duration=3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ta = fs::read(a.path().join("trace.ndjson")).unwrap();
    assert!(!ta.is_empty());
    assert_eq!(ta, fs::read(b.path().join("trace.ndjson")).unwrap());
    let resolved = fs::read_to_string(a.path().join("generate.resolved.yaml")).unwrap();
    assert!(resolved.contains("seed: 4") && resolved.contains("duration: 3"), "{resolved}");
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("generate.json")).unwrap()).unwrap();
    assert!(manifest["packets"].as_u64().unwrap() > 100);

    let c = tempfile::tempdir().unwrap();
    sissa(c.path(), &["generate", "--seed", "5", "--override", "generate.duration=3"]);
    assert_ne!(ta, fs::read(c.path().join("trace.ndjson")).unwrap());
}

#[test]
fn dataset_train_eval_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.yaml");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    for cmd in ["dataset", "train", "eval"] {
        let o = sissa(dir.path(), &[cmd, "--config", cfg, "--seed", "2"]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let ckpt = dir.path().join("model.ckpt");
    let o = sissa(dir.path(), &["bench", "--config", cfg, "--override", &format!("bench.checkpoint={}", ckpt.display())]);
    assert!(o.status.success(), "{}", stderr(&o));

    for f in [
        "dataset/manifest.json",
        "dataset_report.json",
        "model.ckpt",
        "history.csv",
        "train.json",
        "eval/metrics.json",
        "eval/metrics.csv",
        "eval/confusion.csv",
        "eval/grouped.csv",
        "eval/roc.csv",
        "eval/roc.gp",
        "bench.csv",
        "bench.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let history = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");
    let train: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("train.json")).unwrap()).unwrap();
    // window and width follow the dataset
    assert_eq!(train["model"]["window"], 32);
    assert_eq!(train["model"]["features"], 21);
    let metrics: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["variant"], "C");
    assert_eq!(metrics["windows"], 14);
    let bench: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(bench.as_array().unwrap().len(), 1);
    assert_eq!(bench[0]["repetitions"], 20);
}

#[test]
fn dataset_from_generated_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = sissa(dir.path(), &["generate", "--override", "generate.duration=40"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = dir.path().join("trace.ndjson");
    let o = sissa(
        dir.path(),
        &[
            "dataset",
            "--override",
            &format!("dataset.trace={}", trace.display()),
            "--override",
            "dataset.pipeline={window: 32, block_len: 256, windows_per_class: null}",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("dataset/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["width"], 21);
    assert!(m["train_counts"].as_array().unwrap().iter().all(|c| c.as_u64().unwrap() > 0));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = sissa(dir.path(), &["dataset", "--override", "dataset.pipeline.windw=32"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("dataset.pipeline") && e.contains("windw"), "{e}");

    let o = sissa(dir.path(), &["generate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = sissa(dir.path(), &["dataset", "--override", "dataset.pipeline.window=0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = sissa(dir.path(), &["bench", "--override", "bench.warmup=5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = sissa(dir.path(), &["generate", "--config", "/nonexistent/run.yaml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_artifacts_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = sissa(dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.ckpt"), "{}", stderr(&o));
    let o = sissa(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = sissa(dir.path(), &["gradcheck", "--override", "gradcheck.variants=[C, L-A]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert!(rows.as_array().unwrap().iter().all(|r| r["passed"] == true));
}

#[test]
fn workers_flag_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let o = sissa(dir.path(), &["generate", "--workers", "2", "--override", "generate.duration=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sissa(dir.path(), &["generate", "--workers", "0", "--override", "generate.duration=1"]);
    assert_eq!(o.status.code(), Some(2));
}
