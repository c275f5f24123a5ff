//! End-to-end dataset generation: simulate, segment, shuffle, inject,
//! window, filter, balance, split, encode.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{apply_attack, AttackError, AttackParams, AttackTarget};
use crate::dataset::{
    balance_and_split, has_evidence, segment_blocks, shuffle_and_assign, window_starts, windowize, Block,
    ClassLabel, DatasetError, LabeledBlock, RawWindow, NUM_CLASSES,
};
use crate::encode::{encode_window, fit_stats, EncodeError, EncodingSpec, Window};
use crate::failure::{inject_failure, sample_truncated, FailureError, FailureMode, FailureSchedule, FailureScope, WeibullParams};
use crate::seeds::derive_seed;
use crate::sim::{default_latency, run_sim, SimConfig, SimError};
use crate::store::{DatasetSplit, Manifest};
use crate::topology::{Pattern, Topology};
use crate::trace::{Origin, Trace};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Failure(#[from] FailureError),
}

/// Background traffic parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub topology: Topology,
    pub mean_request_interval: f64,
    pub latency: [f64; 2],
    pub event_jitter: f64,
    pub resubscribe_interval: Option<f64>,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            topology: Topology::default_topology(),
            mean_request_interval: 0.05,
            latency: default_latency(),
            event_jitter: 0.0,
            resubscribe_interval: Some(1.0),
        }
    }
}

/// Intensity of each attack class, drawn uniformly per block from `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackPlan {
    pub ddos: [f64; 2],
    pub fake_interface: [f64; 2],
    pub fake_source: [f64; 2],
    pub req_without_res: [f64; 2],
    pub res_without_req: [f64; 2],
    pub target: AttackTarget,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self {
            ddos: [3.0, 8.0],
            fake_interface: [0.3, 1.0],
            fake_source: [0.2, 0.6],
            req_without_res: [0.5, 1.0],
            res_without_req: [0.3, 1.0],
            target: AttackTarget::default(),
        }
    }
}

impl AttackPlan {
    fn range(&self, label: ClassLabel) -> Option<[f64; 2]> {
        Some(match label {
            ClassLabel::Ddos => self.ddos,
            ClassLabel::FakeInterface => self.fake_interface,
            ClassLabel::FakeSource => self.fake_source,
            ClassLabel::ReqWithoutRes => self.req_without_res,
            ClassLabel::ResWithoutReq => self.res_without_req,
            ClassLabel::Normal | ClassLabel::HardwareFailure => return None,
        })
    }
}

/// Hardware failure scenario: a Weibull onset within the block on one ECU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailurePlan {
    /// Weibull scale in seconds after the block start.
    pub alpha: f64,
    pub beta: f64,
    pub mode: FailureMode,
    /// Failing ECU; drawn uniformly per block among request/response
    /// servers when absent.
    pub ecu: Option<u16>,
    pub scope: FailureScope,
}

impl Default for FailurePlan {
    fn default() -> Self {
        Self { alpha: 0.3, beta: 1.5, mode: FailureMode::default(), ecu: None, scope: FailureScope::AllPackets }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Packets per window.
    pub window: usize,
    /// Defaults to `window`.
    pub stride: Option<usize>,
    /// Packets per block.
    pub block_len: usize,
    /// Per-class window cap; the pipeline generates until every class reaches it.
    pub windows_per_class: Option<usize>,
    /// Fixed block count per class; derived from the cap when absent.
    pub blocks_per_class: Option<usize>,
    pub ratio: [usize; 2],
    /// Appends src and dst ECU ids to every row.
    pub include_flow: bool,
    /// Keeps only non-normal windows that show their scenario.
    pub require_evidence: bool,
    /// Generation attempts when the cap is not reached.
    pub max_rounds: usize,
    pub traffic: TrafficConfig,
    pub attacks: AttackPlan,
    pub failure: FailurePlan,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            window: 128,
            stride: None,
            block_len: 512,
            windows_per_class: Some(2573),
            blocks_per_class: None,
            ratio: [8, 2],
            include_flow: false,
            require_evidence: true,
            max_rounds: 4,
            traffic: TrafficConfig::default(),
            attacks: AttackPlan::default(),
            failure: FailurePlan::default(),
        }
    }
}

impl DatasetConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.window)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.window == 0 || self.stride() == 0 {
            return bad("window and stride must be positive".into());
        }
        if self.block_len < self.window {
            return Err(DatasetError::BlockTooSmall { block_len: self.block_len, window: self.window }.into());
        }
        if self.windows_per_class.is_none() && self.blocks_per_class.is_none() {
            return bad("set windows_per_class or blocks_per_class".into());
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1".into());
        }
        for label in ClassLabel::ALL {
            if let Some([lo, hi]) = self.attacks.range(label) {
                let kind = label.attack_kind().unwrap();
                let ok = |x| AttackParams::new(kind, x, 0).validate().is_ok();
                if !(lo <= hi && ok(lo) && ok(hi)) {
                    return bad(format!("{} intensity range [{lo}, {hi}] is invalid", label.name()));
                }
            }
        }
        WeibullParams::new(self.failure.alpha, self.failure.beta)?;
        self.failure.mode.validate()?;
        if let Some(e) = self.failure.ecu {
            if self.traffic.topology.ecu(e).is_none() {
                return Err(FailureError::UnknownEcu(e).into());
            }
        }
        Ok(())
    }
}

/// What one generation run produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub rounds: usize,
    pub simulated_packets: usize,
    pub blocks_per_class: usize,
    /// Windows per class before the evidence filter.
    pub windows: Vec<usize>,
    /// Windows per class after it.
    pub kept: Vec<usize>,
    /// Blocks whose scenario could not be applied.
    pub skipped_blocks: usize,
    pub content_hash: String,
}

/// A labeled block together with the seed of its scenario.
struct Scenario {
    block: LabeledBlock,
    seed: u64,
    skipped: bool,
}

fn simulate(cfg: &DatasetConfig, packets_needed: usize, seed: u64) -> Result<Trace, PipelineError> {
    let t = &cfg.traffic;
    let mk = |duration: f64| SimConfig {
        topology: t.topology.clone(),
        duration,
        mean_request_interval: t.mean_request_interval,
        latency: t.latency,
        event_jitter: t.event_jitter,
        resubscribe_interval: t.resubscribe_interval,
        seed: derive_seed(seed, "traffic", 0),
    };
    let pilot = run_sim(&mk(10.0))?;
    let rate = (pilot.packets.len() as f64 / 10.0).max(1.0);
    let mut duration = packets_needed as f64 / rate * 1.05 + 1.0;
    loop {
        let trace = run_sim(&mk(duration))?;
        if trace.packets.len() >= packets_needed {
            return Ok(trace);
        }
        duration *= 1.25;
    }
}

fn apply_scenario(
    cfg: &DatasetConfig,
    topology: &Topology,
    block: Block,
    label: ClassLabel,
    seed: u64,
) -> Result<Scenario, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sub = Trace { topology: topology.clone(), seed, packets: block.packets };
    let done = |packets, drop_times, skipped| Scenario {
        block: LabeledBlock { index: block.index, label, packets, drop_times },
        seed,
        skipped,
    };
    if let Some([lo, hi]) = cfg.attacks.range(label) {
        let intensity = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let mut params = AttackParams::new(label.attack_kind().unwrap(), intensity, rng.gen());
        params.target = cfg.attacks.target;
        return match apply_attack(&sub, &params) {
            Ok((t, report)) => {
                let unchanged = report.packets_dropped + report.packets_injected + report.packets_mutated == 0;
                if unchanged {
                    warn!("block {}: {} skipped: nothing to attack", block.index, label.name());
                }
                Ok(done(t.packets, report.drop_times, unchanged))
            }
            Err(e @ (AttackError::NoEligible(_) | AttackError::InsufficientAddresses)) => {
                warn!("block {}: {} skipped: {e}", block.index, label.name());
                Ok(done(sub.packets, Vec::new(), true))
            }
            Err(e) => Err(PipelineError::Config(e.to_string())),
        };
    }
    if label == ClassLabel::HardwareFailure {
        let params = WeibullParams::new(cfg.failure.alpha, cfg.failure.beta)?;
        let start = sub.packets.first().map_or(0.0, |p| p.timestamp);
        let span = sub.packets.last().map_or(0.0, |p| p.timestamp) - start;
        let offset = sample_truncated(params, span, &mut rng);
        let ecu = match cfg.failure.ecu {
            Some(e) => e,
            None => *failure_candidates(topology).choose(&mut rng).expect("validated topology"),
        };
        let schedule =
            FailureSchedule { ecu, onset_time: start + offset, mode: cfg.failure.mode.clone(), params, seed: rng.gen(), scope: cfg.failure.scope };
        let (t, report) = inject_failure(&sub, &schedule)?;
        // onset after the ECU's last affected packet leaves nothing to learn
        let unchanged = report.dropped + report.delayed + report.corrupted == 0;
        if unchanged {
            debug!("block {}: failure of ECU {ecu} left no trace, skipped", block.index);
        }
        return Ok(done(t.packets, report.drop_times, unchanged));
    }
    Ok(done(sub.packets, Vec::new(), false))
}

/// ECUs providing a request/response service, whose failure shows on the
/// responses they stop sending; every ECU if there are none.
fn failure_candidates(topology: &Topology) -> Vec<u16> {
    let mut servers: Vec<u16> =
        topology.services.iter().filter(|b| b.pattern == Pattern::RequestResponse).map(|b| b.provider).collect();
    servers.sort_unstable();
    servers.dedup();
    if servers.is_empty() {
        topology.ecu_ids()
    } else {
        servers
    }
}

fn windows_per_block(cfg: &DatasetConfig) -> usize {
    window_starts(cfg.block_len, cfg.window, cfg.stride()).len()
}

/// Segments `trace`, applies class scenarios to `blocks_per_class` blocks
/// of each class and windows them.
fn windows_from_trace(
    cfg: &DatasetConfig,
    trace: &Trace,
    blocks_per_class: usize,
    seed: u64,
) -> Result<(Vec<(RawWindow, u64)>, BuildReport), PipelineError> {
    let blocks = segment_blocks(trace, cfg.block_len, cfg.window)?;
    let assigned = shuffle_and_assign(blocks, blocks_per_class, derive_seed(seed, "shuffle", 0))?;
    let topology = &trace.topology;
    let scenarios: Vec<Scenario> = assigned
        .into_par_iter()
        .map(|(block, label)| {
            let s = derive_seed(seed, "scenario", block.index as u64);
            apply_scenario(cfg, topology, block, label, s)
        })
        .collect::<Result<_, _>>()?;
    let mut report = BuildReport {
        simulated_packets: trace.packets.len(),
        blocks_per_class,
        windows: vec![0; NUM_CLASSES],
        kept: vec![0; NUM_CLASSES],
        ..Default::default()
    };
    let mut out = Vec::new();
    for sc in scenarios {
        if sc.skipped {
            report.skipped_blocks += 1;
            continue;
        }
        debug_assert!(
            sc.block.label == ClassLabel::Normal
                || sc.block.packets.iter().any(|p| p.origin != Origin::Legit)
                || !sc.block.drop_times.is_empty()
        );
        for w in windowize(&sc.block, cfg.window, cfg.stride()) {
            let c = w.label.index();
            report.windows[c] += 1;
            if cfg.require_evidence && w.label != ClassLabel::Normal && !has_evidence(&w, &sc.block.drop_times) {
                continue;
            }
            report.kept[c] += 1;
            out.push((w, sc.seed));
        }
    }
    Ok((out, report))
}

/// A raw window carrying its scenario seed through the split.
struct Tagged(RawWindow, u64);

impl crate::dataset::Labeled for Tagged {
    fn label(&self) -> ClassLabel {
        self.0.label
    }
}

/// Simulates traffic and generates, balances, splits and encodes a dataset.
///
/// Block scenarios run on the current rayon pool; results do not depend on
/// its size. With only a window cap configured, the block count starts at
/// an estimate and grows until every class reaches the cap or
/// `max_rounds` is exhausted.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<(DatasetSplit, BuildReport), PipelineError> {
    cfg.validate()?;
    let wpb = windows_per_block(cfg);
    let mut bpc = match (cfg.blocks_per_class, cfg.windows_per_class) {
        (Some(b), _) => b,
        (None, Some(cap)) => (cap as f64 * 1.25 / wpb as f64).ceil() as usize + 1,
        (None, None) => unreachable!("validated"),
    };
    let mut round = 0;
    let (windows, mut report) = loop {
        round += 1;
        let trace = simulate(cfg, bpc * NUM_CLASSES * cfg.block_len, seed)?;
        let (windows, report) = windows_from_trace(cfg, &trace, bpc, seed)?;
        let min_kept = report.kept.iter().copied().min().unwrap_or(0);
        info!("round {round}: {bpc} blocks/class, kept per class {:?}", report.kept);
        match cfg.windows_per_class {
            Some(cap) if cfg.blocks_per_class.is_none() && min_kept < cap && round < cfg.max_rounds => {
                let yield_per_block = (min_kept as f64 / bpc as f64).max(0.05);
                bpc = ((cap as f64 / yield_per_block) * 1.1).ceil() as usize + 1;
            }
            _ => break (windows, report),
        }
    };
    report.rounds = round;
    finish(cfg, windows, report, seed)
}

/// Builds a dataset from an existing trace. Uses `blocks_per_class` if set,
/// otherwise every complete block.
pub fn build_dataset_from_trace(
    cfg: &DatasetConfig,
    trace: &Trace,
    seed: u64,
) -> Result<(DatasetSplit, BuildReport), PipelineError> {
    let mut cfg = cfg.clone();
    cfg.traffic.topology = trace.topology.clone();
    let available = trace.packets.len() / cfg.block_len.max(1);
    let bpc = *cfg.blocks_per_class.get_or_insert(available / NUM_CLASSES);
    cfg.validate()?;
    if bpc == 0 {
        return Err(DatasetError::InsufficientBlocks { needed: NUM_CLASSES, available }.into());
    }
    let (windows, mut report) = windows_from_trace(&cfg, trace, bpc, seed)?;
    report.rounds = 1;
    finish(&cfg, windows, report, seed)
}

fn finish(
    cfg: &DatasetConfig,
    windows: Vec<(RawWindow, u64)>,
    mut report: BuildReport,
    seed: u64,
) -> Result<(DatasetSplit, BuildReport), PipelineError> {
    let tagged: Vec<Tagged> = windows.into_iter().map(|(w, s)| Tagged(w, s)).collect();
    let (train, val) = balance_and_split(tagged, cfg.ratio, cfg.windows_per_class, derive_seed(seed, "split", 0))?;
    let train_raw: Vec<RawWindow> = train.iter().map(|t| t.0.clone()).collect();
    let stats = fit_stats(&train_raw, cfg.include_flow)?;
    let spec = EncodingSpec { window: cfg.window, include_flow: cfg.include_flow, stats };
    let encode = |ts: &[Tagged]| -> Result<Vec<Window>, EncodeError> {
        ts.par_iter().map(|t| encode_window(&t.0, &spec, t.1)).collect()
    };
    let (train, val) = (encode(&train)?, encode(&val)?);
    let seeds = BTreeMap::from([
        ("global".to_string(), seed),
        ("traffic".to_string(), derive_seed(seed, "traffic", 0)),
        ("shuffle".to_string(), derive_seed(seed, "shuffle", 0)),
        ("split".to_string(), derive_seed(seed, "split", 0)),
    ]);
    let config = serde_json::to_value(cfg).map_err(|e| PipelineError::Config(e.to_string()))?;
    let manifest = Manifest::describe(spec, &train, &val, cfg.ratio, seeds, config);
    let split = DatasetSplit { train, val, manifest };
    report.content_hash = crate::store::split_hash(&split);
    debug!("dataset hash {}", report.content_hash);
    Ok((split, report))
}
