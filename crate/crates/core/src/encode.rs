//! Packet windows to fixed-width feature matrices.
//!
//! Row layout: Δt, service_id, method_id, length, client_id, session_id,
//! protocol_version, interface_version, message type one-hot (5), return
//! code one-hot (4), first four payload bytes / 255. With `include_flow`,
//! src and dst ECU ids follow as two more normalized columns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_packet, CodecError, MessageType, ReturnCode, SomeIpPacket};
use crate::dataset::{ClassLabel, Labeled, RawWindow};
use crate::trace::TimedPacket;

pub const NUMERIC_FIELDS: usize = 8;
pub const MESSAGE_TYPES: usize = 5;
pub const RETURN_CODES: usize = 4;
pub const DIGEST_LEN: usize = 4;
pub const BASE_WIDTH: usize = NUMERIC_FIELDS + MESSAGE_TYPES + RETURN_CODES + DIGEST_LEN;
pub const FLOW_FIELDS: usize = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error("window has {got} packets, expected {expected}")]
    WindowSize { expected: usize, got: usize },
    #[error("normalization stats cover {got} columns, expected {expected}")]
    Stats { expected: usize, got: usize },
    #[error("no windows to fit normalization stats on")]
    Empty,
    #[error("unknown category: {0}")]
    UnknownCategory(CodecError),
    #[error("malformed packet: {0}")]
    Malformed(CodecError),
}

/// Per-column min and max of the normalized numeric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    pub fn columns(&self) -> usize {
        self.min.len()
    }

    /// Maps into [0, 1] over the fitted range; constant columns map to 0.
    /// Values outside the fitted range are not clamped.
    fn apply(&self, col: usize, x: f64) -> f64 {
        let span = self.max[col] - self.min[col];
        if span > 0.0 {
            (x - self.min[col]) / span
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub window: usize,
    pub include_flow: bool,
    pub stats: NormStats,
}

impl EncodingSpec {
    pub fn width(&self) -> usize {
        feature_width(self.include_flow)
    }
}

pub fn feature_width(include_flow: bool) -> usize {
    BASE_WIDTH + if include_flow { FLOW_FIELDS } else { 0 }
}

fn numeric_columns(include_flow: bool) -> usize {
    NUMERIC_FIELDS + if include_flow { FLOW_FIELDS } else { 0 }
}

/// An encoded window, row-major `window × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub id: u64,
    pub features: Vec<f32>,
    pub label: ClassLabel,
    pub block_id: usize,
    pub seed: u64,
}

impl Labeled for Window {
    fn label(&self) -> ClassLabel {
        self.label
    }
}

/// Unnormalized numeric columns of one packet; `dt` is in seconds.
fn raw_numeric(dt: f64, p: &SomeIpPacket, flow: Option<(u16, u16)>) -> Vec<f64> {
    let mut v = vec![
        (dt * 1e3).ln_1p(),
        p.message_id.service_id as f64,
        p.message_id.method_id as f64,
        p.length as f64,
        p.request_id.client_id as f64,
        p.request_id.session_id as f64,
        p.protocol_version as f64,
        p.interface_version as f64,
    ];
    if let Some((s, d)) = flow {
        v.push(s as f64);
        v.push(d as f64);
    }
    v
}

fn deltas(times: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut prev = None;
    times
        .map(|t| {
            let d = prev.map_or(0.0, |p| t - p);
            prev = Some(t);
            d
        })
        .collect()
}

/// Min and max of every numeric column over `windows`.
pub fn fit_stats(windows: &[RawWindow], include_flow: bool) -> Result<NormStats, EncodeError> {
    let cols = numeric_columns(include_flow);
    let mut min = vec![f64::INFINITY; cols];
    let mut max = vec![f64::NEG_INFINITY; cols];
    for w in windows {
        let dts = deltas(w.packets.iter().map(|p| p.timestamp));
        for (tp, dt) in w.packets.iter().zip(dts) {
            let flow = include_flow.then_some((tp.src, tp.dst));
            for (c, x) in raw_numeric(dt, &tp.packet, flow).into_iter().enumerate() {
                min[c] = min[c].min(x);
                max[c] = max[c].max(x);
            }
        }
    }
    if min.iter().any(|m| m.is_infinite()) {
        return Err(EncodeError::Empty);
    }
    Ok(NormStats { min, max })
}

fn check_spec(spec: &EncodingSpec, got: usize) -> Result<(), EncodeError> {
    if got != spec.window {
        return Err(EncodeError::WindowSize { expected: spec.window, got });
    }
    let expected = numeric_columns(spec.include_flow);
    if spec.stats.min.len() != expected || spec.stats.max.len() != expected {
        return Err(EncodeError::Stats { expected, got: spec.stats.columns() });
    }
    Ok(())
}

fn push_row(out: &mut Vec<f32>, spec: &EncodingSpec, dt: f64, p: &SomeIpPacket, flow: Option<(u16, u16)>) {
    let numeric = raw_numeric(dt, p, flow);
    let (base, extra) = numeric.split_at(NUMERIC_FIELDS);
    out.extend(base.iter().enumerate().map(|(c, &x)| spec.stats.apply(c, x) as f32));
    let mut onehot = [0f32; MESSAGE_TYPES + RETURN_CODES];
    onehot[p.message_type.index()] = 1.0;
    onehot[MESSAGE_TYPES + p.return_code.index()] = 1.0;
    out.extend(onehot);
    out.extend((0..DIGEST_LEN).map(|i| p.payload.get(i).map_or(0.0, |&b| b as f32 / 255.0)));
    out.extend(extra.iter().enumerate().map(|(c, &x)| spec.stats.apply(NUMERIC_FIELDS + c, x) as f32));
}

fn encode_packets(packets: &[TimedPacket], spec: &EncodingSpec) -> Result<Vec<f32>, EncodeError> {
    check_spec(spec, packets.len())?;
    let mut out = Vec::with_capacity(spec.window * spec.width());
    let dts = deltas(packets.iter().map(|p| p.timestamp));
    for (tp, dt) in packets.iter().zip(dts) {
        push_row(&mut out, spec, dt, &tp.packet, spec.include_flow.then_some((tp.src, tp.dst)));
    }
    Ok(out)
}

/// Encodes one window; `seed` records the scenario seed of its block.
pub fn encode_window(raw: &RawWindow, spec: &EncodingSpec, seed: u64) -> Result<Window, EncodeError> {
    Ok(Window {
        id: raw.id,
        features: encode_packets(&raw.packets, spec)?,
        label: raw.label,
        block_id: raw.block,
        seed,
    })
}

/// Encodes captured wire records `(timestamp, src, dst, bytes)`. Message
/// types and return codes outside the one-hot vocabulary are rejected.
pub fn encode_wire(records: &[(f64, u16, u16, &[u8])], spec: &EncodingSpec) -> Result<Vec<f32>, EncodeError> {
    check_spec(spec, records.len())?;
    let mut out = Vec::with_capacity(spec.window * spec.width());
    let dts = deltas(records.iter().map(|r| r.0));
    for (&(_, src, dst, bytes), dt) in records.iter().zip(dts) {
        let p = decode_packet(bytes).map_err(|e| match e {
            CodecError::UnknownMessageType(_) | CodecError::UnknownReturnCode(_) => EncodeError::UnknownCategory(e),
            other => EncodeError::Malformed(other),
        })?;
        push_row(&mut out, spec, dt, &p, spec.include_flow.then_some((src, dst)));
    }
    Ok(out)
}

/// Column ranges of the one-hot groups within a row.
pub fn onehot_groups() -> [std::ops::Range<usize>; 2] {
    let mt = NUMERIC_FIELDS..NUMERIC_FIELDS + MessageType::ALL.len();
    let rc = mt.end..mt.end + ReturnCode::ALL.len();
    [mt, rc]
}
