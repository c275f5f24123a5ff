//! Timestamped packet streams and their newline-delimited JSON form.
//!
//! The first line is a header record carrying the topology and seed; every
//! following line is one packet with its wire bytes hex-encoded.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{decode_packet, encode_packet, CodecError, SomeIpPacket};
use crate::topology::Topology;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {source}")]
    Codec { line: usize, source: CodecError },
    #[error("{0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Origin {
    Legit,
    Injected,
    Mutated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedPacket {
    /// Seconds on the simulation clock.
    pub timestamp: f64,
    /// ECU ids.
    pub src: u16,
    pub dst: u16,
    pub packet: SomeIpPacket,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub topology: Topology,
    pub seed: u64,
    pub packets: Vec<TimedPacket>,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    record: String,
    seed: u64,
    topology: Topology,
}

#[derive(Serialize, Deserialize)]
struct PacketRecord {
    t: f64,
    src: u16,
    dst: u16,
    origin: Origin,
    wire: String,
}

impl Trace {
    pub fn new(topology: Topology, seed: u64) -> Self {
        Self { topology, seed, packets: Vec::new() }
    }

    pub fn is_time_ordered(&self) -> bool {
        self.packets.windows(2).all(|w| w[0].timestamp <= w[1].timestamp)
    }

    /// Stable sort by timestamp.
    pub fn sort_by_time(&mut self) {
        self.packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }

    /// Keeps the topology and seed, replaces the packets.
    pub fn with_packets(&self, packets: Vec<TimedPacket>) -> Self {
        Self { topology: self.topology.clone(), seed: self.seed, packets }
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let header = HeaderRecord { record: "header".into(), seed: self.seed, topology: self.topology.clone() };
        serde_json::to_writer(&mut w, &header).map_err(|source| TraceError::Json { line: 1, source })?;
        w.write_all(b"\n")?;
        for (i, p) in self.packets.iter().enumerate() {
            let wire = encode_packet(&p.packet).map_err(|source| TraceError::Codec { line: i + 2, source })?;
            let rec = PacketRecord { t: p.timestamp, src: p.src, dst: p.dst, origin: p.origin, wire: hex::encode(wire) };
            serde_json::to_writer(&mut w, &rec).map_err(|source| TraceError::Json { line: i + 2, source })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> Result<Vec<u8>, TraceError> {
        let mut out = Vec::new();
        self.write_ndjson(&mut out)?;
        Ok(out)
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| TraceError::Format("empty trace file".into()))??;
        let header: HeaderRecord =
            serde_json::from_str(&first).map_err(|source| TraceError::Json { line: 1, source })?;
        if header.record != "header" {
            return Err(TraceError::Format("first record is not a header".into()));
        }
        header.topology.validate().map_err(|e| TraceError::Format(e.to_string()))?;
        let mut trace = Trace::new(header.topology, header.seed);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let n = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PacketRecord = serde_json::from_str(&line).map_err(|source| TraceError::Json { line: n, source })?;
            let bytes = hex::decode(&rec.wire).map_err(|e| TraceError::Format(format!("line {n}: {e}")))?;
            let packet = decode_packet(&bytes).map_err(|source| TraceError::Codec { line: n, source })?;
            for id in [rec.src, rec.dst] {
                if trace.topology.ecu(id).is_none() {
                    return Err(TraceError::Format(format!("line {n}: unknown ECU {id}")));
                }
            }
            trace.packets.push(TimedPacket { timestamp: rec.t, src: rec.src, dst: rec.dst, packet, origin: rec.origin });
        }
        if !trace.is_time_ordered() {
            return Err(TraceError::Format("timestamps decrease".into()));
        }
        Ok(trace)
    }

    /// SHA-256 of the serialized form.
    pub fn content_hash(&self) -> Result<String, TraceError> {
        Ok(hex::encode(Sha256::digest(self.to_ndjson()?)))
    }
}
