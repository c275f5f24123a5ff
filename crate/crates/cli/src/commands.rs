//! One function per subcommand. Each reads its section of the run config,
//! writes its artifacts under `out` and logs a one-line summary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_yaml::Value;
use sissa_core::bench::{benchmark, reports_csv, synthetic_windows, OverheadReport};
use sissa_core::eval::{class_names, evaluate_predictions, roc_csv, roc_gnuplot};
use sissa_core::models::{tiny_gradcheck, Model, ModelError};
use sissa_core::pipeline::{build_dataset, build_dataset_from_trace, PipelineError};
use sissa_core::seeds::derive_seed;
use sissa_core::sim::{run_sim, SimConfig, SimError};
use sissa_core::store::{load_dataset, save_dataset, DatasetSplit, StoreError};
use sissa_core::trace::Trace;
use sissa_core::train::{check_spec, gather, train as fit_model, write_history_csv};

use crate::config::{has_key, RunConfig, SplitName};
use crate::CliError;

pub struct Context {
    pub cfg: RunConfig,
    /// The merged YAML tree, used to tell explicit keys from defaults.
    pub tree: Value,
}

impl Context {
    /// Creates `out` and snapshots the resolved configuration into it.
    pub fn new(cfg: RunConfig, tree: Value, command: &str) -> Result<Self, CliError> {
        fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
        let resolved = serde_yaml::to_string(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
        write(&cfg.out.join(format!("{command}.resolved.yaml")), resolved.as_bytes())?;
        Ok(Self { cfg, tree })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.cfg.seed, stage, 0)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(path, text.as_bytes())
}

fn missing(what: &str) -> CliError {
    CliError::Config(format!("missing `{what}` section"))
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Topology(_) | SimError::Config(_) => CliError::Config(e.to_string()),
            SimError::NoBinding { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Sim(s) => s.into(),
            PipelineError::Config(_) | PipelineError::Failure(_) => CliError::Config(e.to_string()),
            PipelineError::Dataset(_) | PipelineError::Encode(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::SpecMismatch(_) => CliError::Config(e.to_string()),
            ModelError::Nn(_) => CliError::Runtime(e.to_string()),
        }
    }
}

fn load(dir: &Path) -> Result<DatasetSplit, CliError> {
    load_dataset(dir).map_err(|e| match e {
        StoreError::Io { .. } => CliError::Runtime(format!("cannot load dataset {}: {e}", dir.display())),
        _ => CliError::Runtime(format!("dataset {}: {e}", dir.display())),
    })
}

fn load_model(path: &Path) -> Result<(Model, sissa_core::models::CheckpointMeta), CliError> {
    if !path.exists() {
        return Err(CliError::Runtime(format!("checkpoint {} does not exist", path.display())));
    }
    Model::load(path).map_err(|e| CliError::Runtime(format!("checkpoint {}: {e}", path.display())))
}

#[derive(Serialize)]
struct GenerateManifest {
    seed: u64,
    duration: f64,
    packets: usize,
    trace: String,
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let g = ctx.cfg.generate.as_ref().ok_or_else(|| missing("generate"))?;
    let t = &g.traffic;
    let sim = SimConfig {
        topology: t.topology.clone(),
        duration: g.duration,
        mean_request_interval: t.mean_request_interval,
        latency: t.latency,
        event_jitter: t.event_jitter,
        resubscribe_interval: t.resubscribe_interval,
        seed: ctx.seed("generate"),
    };
    let trace = run_sim(&sim)?;
    let path = ctx.out("trace.ndjson");
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    trace.write_ndjson(BufWriter::new(file)).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let manifest =
        GenerateManifest { seed: sim.seed, duration: g.duration, packets: trace.packets.len(), trace: "trace.ndjson".into() };
    write_json(&ctx.out("generate.json"), &manifest)?;
    info!("generated {} packets over {} s into {}", trace.packets.len(), g.duration, path.display());
    Ok(())
}

pub fn dataset(ctx: &Context) -> Result<(), CliError> {
    let d = ctx.cfg.dataset.clone().unwrap_or_default();
    let seed = ctx.seed("dataset");
    let (split, report) = match &d.trace {
        Some(p) => {
            let file = File::open(p).map_err(|e| CliError::Runtime(format!("trace {}: {e}", p.display())))?;
            let trace = Trace::read_ndjson(BufReader::new(file))
                .map_err(|e| CliError::Runtime(format!("trace {}: {e}", p.display())))?;
            build_dataset_from_trace(&d.pipeline, &trace, seed)?
        }
        None => build_dataset(&d.pipeline, seed)?,
    };
    let dir = ctx.out("dataset");
    let hash = save_dataset(&split, &dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    write_json(&ctx.out("dataset_report.json"), &report)?;
    if report.skipped_blocks > 0 {
        warn!("{} blocks could not host their scenario", report.skipped_blocks);
    }
    info!(
        "dataset {}: train {:?}, val {:?}, hash {hash}",
        dir.display(),
        split.manifest.train_counts,
        split.manifest.val_counts
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a sissa_core::models::ModelConfig,
    optim: &'a sissa_core::train::TrainConfig,
    params: usize,
    best_epoch: usize,
    best_val_acc: f64,
    epochs_run: usize,
    dataset_hash: &'a str,
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let t = ctx.cfg.train.clone().unwrap_or_default();
    let dir = t.dataset.clone().unwrap_or_else(|| ctx.out("dataset"));
    let split = load(&dir)?;
    let mut model_cfg = t.model.clone();
    if !has_key(&ctx.tree, "train.model.window") {
        model_cfg.window = split.manifest.encoding.window;
    }
    if !has_key(&ctx.tree, "train.model.features") {
        model_cfg.features = split.manifest.width;
    }
    let mut optim = t.optim.clone();
    optim.seed = ctx.seed("train");
    let outcome = fit_model(&model_cfg, &split, &optim)?;
    let ckpt = ctx.out("model.ckpt");
    outcome.model.save(&ckpt, outcome.meta.clone())?;
    let hist = ctx.out("history.csv");
    let file = File::create(&hist).map_err(|e| io_err(&hist, e))?;
    write_history_csv(&outcome.history, BufWriter::new(file)).map_err(|e| io_err(&hist, e))?;
    write_json(
        &ctx.out("train.json"),
        &TrainSummary {
            model: &model_cfg,
            optim: &optim,
            params: outcome.model.count_params(),
            best_epoch: outcome.meta.epoch,
            best_val_acc: outcome.meta.best_val_acc,
            epochs_run: outcome.history.len(),
            dataset_hash: &split.manifest.content_hash,
        },
    )?;
    info!(
        "{} trained: best val acc {:.4} at epoch {} of {}, saved to {}",
        model_cfg.variant,
        outcome.meta.best_val_acc,
        outcome.meta.epoch,
        outcome.history.len(),
        ckpt.display()
    );
    Ok(())
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let e = ctx.cfg.eval.clone().unwrap_or_default();
    let ckpt = e.checkpoint.clone().unwrap_or_else(|| ctx.out("model.ckpt"));
    let (model, _) = load_model(&ckpt)?;
    let split = load(&e.dataset.clone().unwrap_or_else(|| ctx.out("dataset")))?;
    check_spec(&model.config, &split)?;
    let windows = match e.split {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
    };
    let idx: Vec<usize> = (0..windows.len()).collect();
    let (features, truth) = gather(windows, &idx);
    let (pred, probs) = model.predict(&features, 256)?;
    let (report, curves) = evaluate_predictions(model.config.variant.name(), &truth, &pred, &probs, e.grouped)
        .map_err(|err| CliError::Runtime(err.to_string()))?;
    let dir = ctx.out("eval");
    fs::create_dir_all(&dir).map_err(|err| io_err(&dir, err))?;
    write_json(&dir.join("metrics.json"), &report)?;
    write(&dir.join("metrics.csv"), report.metrics.to_csv().as_bytes())?;
    write(&dir.join("confusion.csv"), report.confusion.to_csv(&class_names()).as_bytes())?;
    if let Some(g) = &report.grouped {
        write(&dir.join("grouped.csv"), g.to_csv().as_bytes())?;
    }
    write(&dir.join("roc.csv"), roc_csv(&curves).as_bytes())?;
    write(&dir.join("roc.gp"), roc_gnuplot(&curves, &class_names(), "roc.csv").as_bytes())?;
    info!(
        "{} on {} windows: accuracy {:.4}, macro F1 {:.4}",
        report.variant, report.windows, report.metrics.accuracy, report.metrics.macro_avg.f1
    );
    Ok(())
}

pub fn bench(ctx: &Context) -> Result<(), CliError> {
    let b = ctx.cfg.bench.clone().unwrap_or_default();
    let seed = ctx.seed("bench");
    let models: Vec<Model> = match &b.checkpoint {
        Some(p) => vec![load_model(p)?.0],
        None => {
            let mut v = Vec::new();
            for &variant in &b.variants {
                for &window in &b.windows {
                    let mut cfg = ctx.cfg.train.as_ref().map(|t| t.model.clone()).unwrap_or_default();
                    cfg.variant = variant;
                    cfg.window = window;
                    v.push(Model::new(cfg, seed)?);
                }
            }
            v
        }
    };
    let mut reports: Vec<OverheadReport> = Vec::with_capacity(models.len());
    for m in &models {
        let inputs = synthetic_windows(&m.config, 64, seed);
        let (r, _) = benchmark(m, &inputs, b.warmup, b.repetitions)?;
        info!(
            "{} n={}: {} params, median {:.3} ms, p99 {:.3} ms",
            r.variant,
            r.window,
            r.params,
            r.median_latency * 1e3,
            r.p99_latency * 1e3
        );
        reports.push(r);
    }
    write(&ctx.out("bench.csv"), reports_csv(&reports).as_bytes())?;
    write_json(&ctx.out("bench.json"), &reports)
}

#[derive(Serialize)]
struct GradcheckRow {
    variant: String,
    max_rel_error: f64,
    tolerance: f64,
    checked: usize,
    worst: Option<String>,
    passed: bool,
}

pub fn gradcheck(ctx: &Context) -> Result<(), CliError> {
    let g = ctx.cfg.gradcheck.clone().unwrap_or_default();
    let seed = ctx.seed("gradcheck");
    let mut rows = Vec::new();
    for &v in &g.variants {
        let r = tiny_gradcheck(v, seed)?;
        info!("{v}: max relative error {:.2e} over {} entries", r.max_rel_error, r.checked);
        rows.push(GradcheckRow {
            variant: v.name().to_string(),
            max_rel_error: r.max_rel_error as f64,
            tolerance: r.tolerance as f64,
            checked: r.checked,
            worst: r.worst.map(|(name, i)| format!("{name}[{i}]")),
            passed: r.passed,
        });
    }
    write_json(&ctx.out("gradcheck.json"), &rows)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.variant.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}
