//! YAML run configuration, flag overrides and the resolved snapshot.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use sissa_core::models::{ModelConfig, Variant, SUPPORTED_WINDOWS};
use sissa_core::pipeline::{DatasetConfig, TrafficConfig};
use sissa_core::train::TrainConfig;

use crate::CliError;

/// Everything one invocation needs. Every section is optional; a command
/// only reads its own.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; each stage derives its own from it and the stage name.
    #[serde(default)]
    pub seed: u64,
    /// Output directory.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads for block-parallel stages; all cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckSection>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    /// Seconds of simulated traffic.
    pub duration: f64,
    #[serde(default)]
    pub traffic: TrafficConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// NDJSON trace from `generate`; traffic is simulated on the fly when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub pipeline: DatasetConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Dataset directory; `<out>/dataset` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// `window` and `features` follow the dataset unless given.
    #[serde(default)]
    pub model: ModelConfig,
    /// Its `seed` is replaced by the one derived for the train stage.
    #[serde(default)]
    pub optim: TrainConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    #[default]
    Val,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// `<out>/model.ckpt` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// `<out>/dataset` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitName,
    /// Also report the Normal | Attack | Failure collapsed metrics.
    #[serde(default)]
    pub grouped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub variants: Vec<Variant>,
    pub windows: Vec<usize>,
    pub warmup: usize,
    pub repetitions: usize,
    /// Benchmark this trained model only instead of the variant grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            windows: SUPPORTED_WINDOWS.to_vec(),
            warmup: 100,
            repetitions: 1000,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub variants: Vec<Variant>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec() }
    }
}

/// Sets `dotted.key.path` to `value` (parsed as YAML), creating mappings
/// along the way.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value: Value = serde_yaml::from_str(raw)
        .map_err(|e| CliError::Config(format!("override {key}: value {raw:?} is not YAML: {e}")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} has an empty segment")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Mapping(Mapping::new());
        }
        let Value::Mapping(map) = node else {
            return Err(CliError::Config(format!("override {key}: {} is not a mapping", parts[..i].join("."))));
        };
        let k = Value::String((*part).to_string());
        if i + 1 == parts.len() {
            map.insert(k, value);
            return Ok(());
        }
        node = map.entry(k).or_insert(Value::Null);
    }
    unreachable!("non-empty key")
}

/// Whether the raw tree sets `dotted.key.path`.
pub fn has_key(root: &Value, key: &str) -> bool {
    key.split('.').try_fold(root, |node, part| node.get(part)).is_some()
}

/// Reads the YAML file (or an empty tree) and applies the overrides.
pub fn load_tree(path: Option<&Path>, overrides: &[String]) -> Result<Value, CliError> {
    let mut tree = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_yaml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Mapping(Mapping::new()),
    };
    if tree.is_null() {
        tree = Value::Mapping(Mapping::new());
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    Ok(tree)
}

/// Deserializes the tree, naming the offending key on error.
pub fn parse(tree: Value) -> Result<RunConfig, CliError> {
    serde_path_to_error::deserialize(tree).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("{path}: {inner}"))
        }
    })
}
