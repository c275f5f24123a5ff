mod common;

use std::sync::OnceLock;

use common::*;
use sissa_core::dataset::*;
use sissa_core::encode::{encode_window, onehot_groups, Window};
use sissa_core::pipeline::*;
use sissa_core::store::{load_dataset, save_dataset, split_hash, DatasetSplit, StoreError};

fn desk() -> DatasetConfig {
    DatasetConfig { window: 32, block_len: 256, windows_per_class: Some(300), ..Default::default() }
}

fn desk_split() -> &'static (DatasetSplit, BuildReport) {
    static SPLIT: OnceLock<(DatasetSplit, BuildReport)> = OnceLock::new();
    SPLIT.get_or_init(|| build_dataset(&desk(), 7).unwrap())
}

fn counts(ws: &[Window]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for w in ws {
        c[w.label.index()] += 1;
    }
    c
}

#[test]
fn desk_dataset_is_balanced_and_split_eight_to_two() {
    let (split, report) = desk_split();
    assert_eq!(counts(&split.train), [240; NUM_CLASSES]);
    assert_eq!(counts(&split.val), [60; NUM_CLASSES]);
    assert!(report.kept.iter().all(|&k| k >= 300), "{report:?}");
    assert_eq!(split.manifest.train_counts, vec![240; NUM_CLASSES]);
    let mut ids: Vec<u64> = split.train.iter().chain(&split.val).map(|w| w.id).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 2100);
}

#[test]
fn desk_features_are_finite_and_one_hot() {
    let (split, _) = desk_split();
    let d = split.manifest.width;
    assert_eq!(d, 21);
    for w in split.train.iter().chain(&split.val) {
        assert_eq!(w.features.len(), 32 * d);
        assert!(w.features.iter().all(|v| v.is_finite()));
        for row in w.features.chunks(d) {
            for g in onehot_groups() {
                assert_eq!(row[g].iter().sum::<f32>(), 1.0);
            }
        }
    }
    // normalization stats come from the training split
    for w in &split.train {
        assert!(w.features.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn regeneration_is_hash_identical() {
    let (split, report) = desk_split();
    let (again, again_report) = build_dataset(&desk(), 7).unwrap();
    assert_eq!(split_hash(&again), split_hash(split));
    assert_eq!(again_report, *report);
    let (other, _) = build_dataset(&desk(), 8).unwrap();
    assert_ne!(split_hash(&other), split_hash(split));
}

#[test]
fn regeneration_does_not_depend_on_pool_size() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let cfg = DatasetConfig { windows_per_class: Some(40), ..desk() };
    let a = build_dataset(&cfg, 2).unwrap().1.content_hash;
    let b = pool.install(|| build_dataset(&cfg, 2)).unwrap().1.content_hash;
    assert_eq!(a, b);
}

#[test]
fn save_load_round_trip() {
    let (split, report) = desk_split();
    let dir = tempfile::tempdir().unwrap();
    let hash = save_dataset(split, dir.path()).unwrap();
    assert_eq!(hash, report.content_hash);
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.train, split.train);
    assert_eq!(back.val, split.val);
    assert_eq!(back.manifest.encoding, split.manifest.encoding);
    assert_eq!(back.manifest.seeds.get("global"), Some(&7));
    // flipping one feature byte is caught
    let f = dir.path().join("val.f32");
    let mut bytes = std::fs::read(&f).unwrap();
    bytes[100] ^= 1;
    std::fs::write(&f, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(StoreError::ManifestMismatch(_))));
}

/// Blocks of a known trace, so windows can be re-derived from their ids.
fn from_trace() -> (sissa_core::trace::Trace, DatasetConfig, DatasetSplit) {
    let trace = default_trace(60.0, 21);
    let cfg = DatasetConfig { window: 32, block_len: 256, windows_per_class: None, blocks_per_class: Some(8), ..Default::default() };
    let (split, report) = build_dataset_from_trace(&cfg, &trace, 5).unwrap();
    assert_eq!(report.blocks_per_class, 8);
    (trace, cfg, split)
}

#[test]
fn normal_windows_are_untouched_and_others_differ() {
    let (trace, cfg, split) = from_trace();
    let blocks = segment_blocks(&trace, cfg.block_len, cfg.window).unwrap();
    let spec = &split.manifest.encoding;
    let (mut normal, mut other) = (0, 0);
    for w in split.train.iter().chain(&split.val) {
        let block = &blocks[w.block_id];
        let pos = (w.id & 0xFFFFF) as usize * cfg.stride();
        if pos + cfg.window > block.packets.len() {
            // injections lengthened the block past its clean size
            assert_ne!(w.label, ClassLabel::Normal);
            other += 1;
            continue;
        }
        let clean = RawWindow {
            id: w.id,
            block: w.block_id,
            label: w.label,
            packets: block.packets[pos..pos + cfg.window].to_vec(),
        };
        let encoded = encode_window(&clean, spec, w.seed).unwrap();
        if w.label == ClassLabel::Normal {
            assert_eq!(encoded.features, w.features, "normal window {} altered", w.id);
            normal += 1;
        } else {
            assert_ne!(encoded.features, w.features, "{} window {} shows no change", w.label.name(), w.id);
            other += 1;
        }
    }
    assert!(normal > 0 && other > 0);
}

#[test]
fn other_ratios_split_accordingly() {
    let (trace, cfg, _) = from_trace();
    let cfg = DatasetConfig { ratio: [9, 1], ..cfg };
    let (split, _) = build_dataset_from_trace(&cfg, &trace, 5).unwrap();
    let (tr, va) = (counts(&split.train), counts(&split.val));
    let total = tr[0] + va[0];
    assert!(tr.iter().all(|&c| c == tr[0]) && va.iter().all(|&c| c == va[0]));
    assert_eq!(tr[0], (total as f64 * 0.9).round() as usize);
}

#[test]
fn flow_columns_widen_rows() {
    let (trace, cfg, _) = from_trace();
    let (split, _) = build_dataset_from_trace(&DatasetConfig { include_flow: true, ..cfg }, &trace, 5).unwrap();
    assert_eq!(split.manifest.width, 23);
    assert!(split.train.iter().all(|w| w.features.len() == 32 * 23));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        DatasetConfig { block_len: 16, ..desk() },
        DatasetConfig { windows_per_class: None, ..desk() },
        DatasetConfig { max_rounds: 0, ..desk() },
    ];
    for cfg in bad {
        assert!(build_dataset(&cfg, 0).is_err());
    }
    let mut cfg = desk();
    cfg.attacks.ddos = [0.5, 2.0];
    assert!(matches!(build_dataset(&cfg, 0), Err(PipelineError::Config(_))));
    let mut cfg = desk();
    cfg.failure.ecu = Some(99);
    assert!(build_dataset(&cfg, 0).is_err());
    let short = default_trace(1.0, 1);
    assert!(build_dataset_from_trace(&DatasetConfig { blocks_per_class: None, ..desk() }, &short, 0).is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    let err = serde_json::from_str::<DatasetConfig>(r#"{"window": 32, "windw": 4}"#).unwrap_err();
    assert!(err.to_string().contains("windw"));
    let cfg: DatasetConfig = serde_json::from_str(r#"{"window": 64}"#).unwrap();
    assert_eq!((cfg.window, cfg.stride(), cfg.block_len), (64, 64, 512));
}
