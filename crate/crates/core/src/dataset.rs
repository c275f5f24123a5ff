//! Class labels, block segmentation, windowing and balanced splitting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackKind;
use crate::seeds::derive_seed;
use crate::trace::{Origin, TimedPacket, Trace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("block length {block_len} is smaller than the window size {window}")]
    BlockTooSmall { block_len: usize, window: usize },
    #[error("need {needed} blocks, trace yields {available}")]
    InsufficientBlocks { needed: usize, available: usize },
    #[error("class {class} has {count} windows, at least {needed} required")]
    InsufficientWindows { class: &'static str, count: usize, needed: usize },
    #[error("invalid split ratio {0:?}")]
    Ratio([usize; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClassLabel {
    Normal,
    Ddos,
    FakeInterface,
    FakeSource,
    ReqWithoutRes,
    ResWithoutReq,
    HardwareFailure,
}

pub const NUM_CLASSES: usize = 7;

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        Self::Normal,
        Self::Ddos,
        Self::FakeInterface,
        Self::FakeSource,
        Self::ReqWithoutRes,
        Self::ResWithoutReq,
        Self::HardwareFailure,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Normal => "Normal",
            Self::Ddos => "DDoS",
            Self::FakeInterface => "Fake Interface",
            Self::FakeSource => "Fake Source",
            Self::ReqWithoutRes => "Request without Response",
            Self::ResWithoutReq => "Response without Request",
            Self::HardwareFailure => "Hardware Failure",
        }
    }

    pub fn attack_kind(self) -> Option<AttackKind> {
        match self {
            Self::Ddos => Some(AttackKind::Ddos),
            Self::FakeInterface => Some(AttackKind::FakeInterface),
            Self::FakeSource => Some(AttackKind::FakeSource),
            Self::ReqWithoutRes => Some(AttackKind::RequestWithoutResponse),
            Self::ResWithoutReq => Some(AttackKind::ResponseWithoutRequest),
            Self::Normal | Self::HardwareFailure => None,
        }
    }
}

/// Consecutive packets cut from a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub index: usize,
    pub packets: Vec<TimedPacket>,
}

/// A block after its class scenario has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBlock {
    pub index: usize,
    pub label: ClassLabel,
    pub packets: Vec<TimedPacket>,
    /// Original timestamps of packets the scenario removed.
    pub drop_times: Vec<f64>,
}

/// `n` consecutive packets of one labeled block.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    /// `block << 20 | position`; unique within a dataset.
    pub id: u64,
    pub block: usize,
    pub label: ClassLabel,
    pub packets: Vec<TimedPacket>,
}

pub trait Labeled {
    fn label(&self) -> ClassLabel;
}

impl Labeled for RawWindow {
    fn label(&self) -> ClassLabel {
        self.label
    }
}

/// Non-overlapping blocks of `block_len` packets; the remainder is dropped.
pub fn segment_blocks(trace: &Trace, block_len: usize, window: usize) -> Result<Vec<Block>, DatasetError> {
    if block_len < window || block_len == 0 {
        return Err(DatasetError::BlockTooSmall { block_len, window });
    }
    Ok(trace
        .packets
        .chunks_exact(block_len)
        .enumerate()
        .map(|(index, c)| Block { index, packets: c.to_vec() })
        .collect())
}

/// Shuffles the blocks and hands `per_class` of them to each class in label order.
pub fn shuffle_and_assign(
    mut blocks: Vec<Block>,
    per_class: usize,
    seed: u64,
) -> Result<Vec<(Block, ClassLabel)>, DatasetError> {
    let needed = per_class * NUM_CLASSES;
    if blocks.len() < needed {
        return Err(DatasetError::InsufficientBlocks { needed, available: blocks.len() });
    }
    blocks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    blocks.truncate(needed);
    Ok(blocks.into_iter().enumerate().map(|(i, b)| (b, ClassLabel::ALL[i / per_class])).collect())
}

/// Start offsets of the windows of length `n` at `stride` in `len` packets.
pub fn window_starts(len: usize, n: usize, stride: usize) -> Vec<usize> {
    assert!(n > 0 && stride > 0);
    if len < n {
        return Vec::new();
    }
    (0..=len - n).step_by(stride).collect()
}

pub fn windowize(block: &LabeledBlock, n: usize, stride: usize) -> Vec<RawWindow> {
    window_starts(block.packets.len(), n, stride)
        .into_iter()
        .enumerate()
        .map(|(k, s)| RawWindow {
            id: ((block.index as u64) << 20) | k as u64,
            block: block.index,
            label: block.label,
            packets: block.packets[s..s + n].to_vec(),
        })
        .collect()
}

/// Whether the window shows its block's scenario: an injected or mutated
/// packet, or a removal inside its time span.
pub fn has_evidence(window: &RawWindow, drop_times: &[f64]) -> bool {
    if window.packets.iter().any(|p| p.origin != Origin::Legit) {
        return true;
    }
    let (Some(first), Some(last)) = (window.packets.first(), window.packets.last()) else {
        return false;
    };
    drop_times.iter().any(|&t| t >= first.timestamp && t <= last.timestamp)
}

/// Truncates every class to the smallest class count (and to `cap` if
/// given), shuffles each class and splits it `ratio[0] : ratio[1]`.
pub fn balance_and_split<T: Labeled>(
    windows: Vec<T>,
    ratio: [usize; 2],
    cap: Option<usize>,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if ratio[0] == 0 || ratio[1] == 0 {
        return Err(DatasetError::Ratio(ratio));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<T>> = ClassLabel::ALL.iter().map(|&c| (c, Vec::new())).collect();
    for w in windows {
        by_class.get_mut(&w.label()).unwrap().push(w);
    }
    let (min_class, min) = by_class.iter().map(|(c, v)| (*c, v.len())).min_by_key(|&(_, n)| n).unwrap();
    let keep = cap.map_or(min, |c| c.min(min));
    let needed = ratio[0] + ratio[1];
    if keep < needed.max(10) {
        return Err(DatasetError::InsufficientWindows { class: min_class.name(), count: min, needed: needed.max(10) });
    }
    let n_train = (keep as f64 * ratio[0] as f64 / needed as f64).round() as usize;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut items) in by_class {
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", class.index() as u64)));
        items.truncate(keep);
        let rest = items.split_off(n_train);
        train.extend(items);
        val.extend(rest);
    }
    Ok((train, val))
}
