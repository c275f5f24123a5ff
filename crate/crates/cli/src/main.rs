//! `sissa`: simulate SOME/IP traffic, build window datasets, train, evaluate
//! and benchmark the detectors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or inconsistent inputs; exit code 2.
    Config(String),
    /// Everything else: I/O, missing artifacts, insufficient data; exit code 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "sissa", version, about = "SOME/IP intrusion and failure detection toolkit")]
struct Cli {
    /// YAML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for block-parallel stages (overrides `workers`).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// `dotted.key=value` applied to the configuration; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate traffic and write an NDJSON trace plus manifest.
    Generate,
    /// Segment, inject, window, balance, split and save a dataset.
    Dataset,
    /// Train a detector on a saved dataset.
    Train,
    /// Evaluate a checkpoint on a dataset split.
    Eval,
    /// Measure parameter counts and per-window latency.
    Bench,
    /// Finite-difference gradient check of every variant at a tiny size.
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Dataset => "dataset",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Bench => "bench",
            Command::Gradcheck => "gradcheck",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        // quoted so YAML keeps it a string
        overrides.push(format!("out={}", serde_json::to_string(&o.display().to_string()).expect("string")));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    let tree = config::load_tree(cli.config.as_deref(), &overrides)?;
    let cfg = config::parse(tree.clone())?;
    if let Some(w) = cfg.workers {
        if w == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
    }
    let ctx = commands::Context::new(cfg, tree, cli.command.name())?;
    match cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Dataset => commands::dataset(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Bench => commands::bench(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SISSA_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
