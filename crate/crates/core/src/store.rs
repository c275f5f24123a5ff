//! Dataset persistence: `manifest.json`, `train.f32`, `train.labels.u8`,
//! `val.f32`, `val.labels.u8`.
//!
//! Feature files hold row-major little-endian f32 matrices, one
//! `window × width` block per window; label files hold one class index byte
//! per window. The manifest keys are:
//!
//! - `format_version`: layout version, currently 1
//! - `encoding`: window size, flow flag and normalization stats
//! - `width`: feature columns per packet row
//! - `classes`: class names by index
//! - `train_counts`, `val_counts`: windows per class
//! - `ratio`: train:val split ratio
//! - `seeds`: named seeds used during generation
//! - `train`, `val`: per-window id, block and scenario seed, in file order
//! - `config`: the generating configuration, free-form
//! - `content_hash`: sha256 over the manifest (with this field empty) and
//!   the four data files

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{ClassLabel, NUM_CLASSES};
use crate::encode::{EncodingSpec, Window};

pub const FORMAT_VERSION: u32 = 1;
const FILES: [&str; 4] = ["train.f32", "train.labels.u8", "val.f32", "val.labels.u8"];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub id: u64,
    pub block: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub encoding: EncodingSpec,
    pub width: usize,
    pub classes: Vec<String>,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub ratio: [usize; 2],
    pub seeds: BTreeMap<String, u64>,
    pub train: Vec<WindowMeta>,
    pub val: Vec<WindowMeta>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub manifest: Manifest,
}

pub fn class_counts(windows: &[Window]) -> Vec<usize> {
    let mut c = vec![0; NUM_CLASSES];
    for w in windows {
        c[w.label.index()] += 1;
    }
    c
}

pub fn window_meta(windows: &[Window]) -> Vec<WindowMeta> {
    windows.iter().map(|w| WindowMeta { id: w.id, block: w.block_id, seed: w.seed }).collect()
}

impl Manifest {
    /// A manifest describing `train` and `val`, with an empty hash.
    pub fn describe(
        encoding: EncodingSpec,
        train: &[Window],
        val: &[Window],
        ratio: [usize; 2],
        seeds: BTreeMap<String, u64>,
        config: serde_json::Value,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            width: encoding.width(),
            encoding,
            classes: ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect(),
            train_counts: class_counts(train),
            val_counts: class_counts(val),
            ratio,
            seeds,
            train: window_meta(train),
            val: window_meta(val),
            config,
            content_hash: String::new(),
        }
    }

    pub fn row_len(&self) -> usize {
        self.encoding.window * self.width
    }
}

fn features_bytes(ws: &[Window]) -> Vec<u8> {
    ws.iter().flat_map(|w| w.features.iter().flat_map(|x| x.to_le_bytes())).collect()
}

fn label_bytes(ws: &[Window]) -> Vec<u8> {
    ws.iter().map(|w| w.label.index() as u8).collect()
}

fn content_hash(manifest: &Manifest, files: &[Vec<u8>]) -> Result<String, StoreError> {
    let mut m = manifest.clone();
    m.content_hash.clear();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&m)?);
    for f in files {
        h.update((f.len() as u64).to_le_bytes());
        h.update(f);
    }
    Ok(hex::encode(h.finalize()))
}

/// The hash `save_dataset` would record for `split`.
pub fn split_hash(split: &DatasetSplit) -> String {
    let files =
        [features_bytes(&split.train), label_bytes(&split.train), features_bytes(&split.val), label_bytes(&split.val)];
    content_hash(&split.manifest, &files).expect("manifest serializes")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

/// Writes the dataset; returns the content hash recorded in the manifest.
pub fn save_dataset(split: &DatasetSplit, dir: &Path) -> Result<String, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files =
        [features_bytes(&split.train), label_bytes(&split.train), features_bytes(&split.val), label_bytes(&split.val)];
    let mut manifest = split.manifest.clone();
    manifest.content_hash = content_hash(&manifest, &files)?;
    debug_assert_eq!(manifest.content_hash, split_hash(split));
    for (name, bytes) in FILES.iter().zip(&files) {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&p))?;
    Ok(manifest.content_hash)
}

fn decode_windows(
    feats: &[u8],
    labels: &[u8],
    meta: &[WindowMeta],
    row_len: usize,
    which: &str,
) -> Result<Vec<Window>, StoreError> {
    let mismatch = |m: String| StoreError::ManifestMismatch(format!("{which}: {m}"));
    if labels.len() != meta.len() {
        return Err(mismatch(format!("{} labels for {} windows", labels.len(), meta.len())));
    }
    if feats.len() != meta.len() * row_len * 4 {
        return Err(mismatch(format!("{} feature bytes, expected {}", feats.len(), meta.len() * row_len * 4)));
    }
    let mut out = Vec::with_capacity(meta.len());
    for (i, (m, &l)) in meta.iter().zip(labels).enumerate() {
        let label = ClassLabel::from_index(l as usize).ok_or_else(|| mismatch(format!("label {l} out of range")))?;
        let chunk = &feats[i * row_len * 4..(i + 1) * row_len * 4];
        let features = chunk.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push(Window { id: m.id, features, label, block_id: m.block, seed: m.seed });
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit, StoreError> {
    let p = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&p).map_err(io_err(&p))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(StoreError::ManifestMismatch(format!("format version {}", manifest.format_version)));
    }
    let mut files = Vec::with_capacity(FILES.len());
    for name in FILES {
        let p = dir.join(name);
        files.push(fs::read(&p).map_err(io_err(&p))?);
    }
    let actual = content_hash(&manifest, &files)?;
    if actual != manifest.content_hash {
        return Err(StoreError::ManifestMismatch(format!(
            "content hash {} does not match recorded {}",
            actual, manifest.content_hash
        )));
    }
    if manifest.width != manifest.encoding.width() {
        return Err(StoreError::ManifestMismatch(format!("width {}", manifest.width)));
    }
    let row = manifest.row_len();
    let train = decode_windows(&files[0], &files[1], &manifest.train, row, "train")?;
    let val = decode_windows(&files[2], &files[3], &manifest.val, row, "val")?;
    if class_counts(&train) != manifest.train_counts || class_counts(&val) != manifest.val_counts {
        return Err(StoreError::ManifestMismatch("class counts".into()));
    }
    Ok(DatasetSplit { train, val, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::NormStats;

    fn split() -> DatasetSplit {
        let enc = EncodingSpec { window: 2, include_flow: false, stats: NormStats { min: vec![0.0; 8], max: vec![1.0; 8] } };
        let mk = |id: u64, label: ClassLabel| Window {
            id,
            features: (0..42).map(|i| (i as f32 + id as f32).sin() * 1e-3 + f32::EPSILON).collect(),
            label,
            block_id: id as usize / 3,
            seed: id * 7,
        };
        let train: Vec<Window> = ClassLabel::ALL.iter().enumerate().map(|(i, &c)| mk(i as u64, c)).collect();
        let val: Vec<Window> = ClassLabel::ALL.iter().enumerate().map(|(i, &c)| mk(100 + i as u64, c)).collect();
        let manifest = Manifest::describe(enc, &train, &val, [8, 2], BTreeMap::from([("global".into(), 5)]), serde_json::Value::Null);
        DatasetSplit { train, val, manifest }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = split();
        let hash = save_dataset(&s, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.train, s.train);
        assert_eq!(back.val, s.val);
        assert_eq!(back.manifest.content_hash, hash);
        assert_eq!(back.manifest.train_counts, vec![1; 7]);
        assert_eq!(back.manifest.seeds["global"], 5);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&split(), dir.path()).unwrap();
        let mp = dir.path().join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&mp).unwrap()).unwrap();
        m["content_hash"] = serde_json::Value::String("00".repeat(32));
        fs::write(&mp, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(StoreError::ManifestMismatch(_))));

        let dir = tempfile::tempdir().unwrap();
        save_dataset(&split(), dir.path()).unwrap();
        let fp = dir.path().join("val.f32");
        let mut b = fs::read(&fp).unwrap();
        b[0] ^= 1;
        fs::write(&fp, b).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(StoreError::ManifestMismatch(_))));
    }

    #[test]
    fn missing_directory_is_io_error() {
        assert!(matches!(load_dataset(Path::new("/nonexistent/ds")), Err(StoreError::Io { .. })));
    }
}
