//! Weibull lifetime model and the traffic signature of a failed ECU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{MessageType, ReturnCode};
use crate::trace::{Origin, TimedPacket, Trace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FailureError {
    #[error("time {0} is outside the domain t >= 0")]
    Domain(f64),
    #[error("invalid Weibull parameters alpha={alpha}, beta={beta}")]
    Params { alpha: f64, beta: f64 },
    #[error("ECU {0} is not in the trace topology")]
    UnknownEcu(u16),
    #[error("invalid failure mode: {0}")]
    Mode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeibullParams {
    /// Scale, in seconds.
    pub alpha: f64,
    /// Shape.
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    InfantMortality,
    Random,
    WearOut,
}

/// Absolute tolerance for treating the shape as exactly 1.
pub const RANDOM_REGIME_TOL: f64 = 1e-9;

impl WeibullParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, FailureError> {
        let p = Self { alpha, beta };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), FailureError> {
        if self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite() {
            Ok(())
        } else {
            Err(FailureError::Params { alpha: self.alpha, beta: self.beta })
        }
    }

    pub fn median(&self) -> f64 {
        self.alpha * std::f64::consts::LN_2.powf(1.0 / self.beta)
    }
}

fn domain(t: f64) -> Result<(), FailureError> {
    if t >= 0.0 {
        Ok(())
    } else {
        Err(FailureError::Domain(t))
    }
}

/// `(β/α)(t/α)^(β-1) exp(-(t/α)^β)`; `+inf` at `t = 0` when `β < 1`.
pub fn weibull_pdf(t: f64, p: WeibullParams) -> Result<f64, FailureError> {
    domain(t)?;
    p.check()?;
    let z = t / p.alpha;
    Ok((p.beta / p.alpha) * z.powf(p.beta - 1.0) * (-z.powf(p.beta)).exp())
}

/// `1 - exp(-(t/α)^β)`.
pub fn weibull_cdf(t: f64, p: WeibullParams) -> Result<f64, FailureError> {
    domain(t)?;
    p.check()?;
    Ok(-(-(t / p.alpha).powf(p.beta)).exp_m1())
}

/// `(β/α)(t/α)^(β-1)`.
pub fn hazard_rate(t: f64, p: WeibullParams) -> Result<f64, FailureError> {
    domain(t)?;
    p.check()?;
    Ok((p.beta / p.alpha) * (t / p.alpha).powf(p.beta - 1.0))
}

pub fn classify_regime(beta: f64) -> Regime {
    if (beta - 1.0).abs() <= RANDOM_REGIME_TOL {
        Regime::Random
    } else if beta < 1.0 {
        Regime::InfantMortality
    } else {
        Regime::WearOut
    }
}

fn invert_survival(p: WeibullParams, survival: f64) -> f64 {
    p.alpha * (-survival.ln()).powf(1.0 / p.beta)
}

/// Inverse-CDF draw `α(-ln u)^(1/β)`.
pub fn sample_failure_time<R: Rng + ?Sized>(p: WeibullParams, rng: &mut R) -> f64 {
    // u in (0, 1]
    let u = 1.0 - rng.gen::<f64>();
    invert_survival(p, u)
}

/// Exact draw from the distribution conditioned on `t < limit`.
pub fn sample_truncated<R: Rng + ?Sized>(p: WeibullParams, limit: f64, rng: &mut R) -> f64 {
    let mass = weibull_cdf(limit.max(0.0), p).unwrap_or(0.0);
    if mass <= 0.0 {
        return 0.0;
    }
    let u = rng.gen::<f64>() * mass;
    invert_survival(p, 1.0 - u).min(limit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptField {
    ProtocolVersion,
    InterfaceVersion,
    ReturnCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FailureMode {
    /// Each affected packet is lost with this probability.
    Omission { drop_prob: f64 },
    /// Each affected packet arrives late by a uniform multiple of the nominal latency.
    Delay { nominal_latency: f64, min_factor: f64, max_factor: f64 },
    /// The field is corrupted with this probability.
    Corruption { field: CorruptField, prob: f64 },
    /// Components applied in order to every affected packet.
    Mixture { components: Vec<FailureMode> },
}

impl Default for FailureMode {
    fn default() -> Self {
        FailureMode::Mixture {
            components: vec![
                FailureMode::Omission { drop_prob: 0.6 },
                FailureMode::Delay { nominal_latency: 0.003, min_factor: 2.0, max_factor: 5.0 },
                FailureMode::Corruption { field: CorruptField::ReturnCode, prob: 0.3 },
            ],
        }
    }
}

impl FailureMode {
    pub fn validate(&self) -> Result<(), FailureError> {
        let prob_ok = |p: f64| p > 0.0 && p <= 1.0;
        match self {
            FailureMode::Omission { drop_prob } if !prob_ok(*drop_prob) => {
                Err(FailureError::Mode(format!("drop_prob {drop_prob} not in (0, 1]")))
            }
            FailureMode::Corruption { prob, .. } if !prob_ok(*prob) => {
                Err(FailureError::Mode(format!("prob {prob} not in (0, 1]")))
            }
            FailureMode::Delay { nominal_latency, min_factor, max_factor }
                if !(*nominal_latency > 0.0 && *min_factor >= 0.0 && min_factor <= max_factor) =>
            {
                Err(FailureError::Mode("delay needs nominal_latency > 0 and 0 <= min_factor <= max_factor".into()))
            }
            FailureMode::Mixture { components } => components.iter().try_for_each(|c| c.validate()),
            _ => Ok(()),
        }
    }
}

/// Which of the failed ECU's packets the failure mode acts on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureScope {
    #[default]
    AllPackets,
    /// RESPONSE and ERROR messages only: a server that stops answering
    /// properly while its own requests still go out.
    Responses,
}

impl FailureScope {
    fn covers(self, p: &TimedPacket) -> bool {
        match self {
            FailureScope::AllPackets => true,
            FailureScope::Responses => matches!(p.packet.message_type, MessageType::Response | MessageType::Error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureSchedule {
    pub ecu: u16,
    pub onset_time: f64,
    pub mode: FailureMode,
    pub params: WeibullParams,
    pub seed: u64,
    #[serde(default)]
    pub scope: FailureScope,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub dropped: usize,
    pub delayed: usize,
    pub corrupted: usize,
    /// Original timestamps of the lost packets.
    pub drop_times: Vec<f64>,
}

enum Fate {
    Dropped,
    Kept { delayed: bool, corrupted: bool },
}

fn apply_mode(mode: &FailureMode, p: &mut TimedPacket, rng: &mut ChaCha8Rng, fate: &mut Fate) {
    let Fate::Kept { delayed, corrupted } = fate else { return };
    match mode {
        FailureMode::Omission { drop_prob } => {
            if rng.gen::<f64>() < *drop_prob {
                *fate = Fate::Dropped;
            }
        }
        FailureMode::Delay { nominal_latency, min_factor, max_factor } => {
            let factor = if min_factor < max_factor { rng.gen_range(*min_factor..*max_factor) } else { *min_factor };
            p.timestamp += factor * nominal_latency;
            *delayed = true;
        }
        FailureMode::Corruption { field, prob } => {
            if rng.gen::<f64>() < *prob {
                let h = &mut p.packet;
                match field {
                    CorruptField::ProtocolVersion => h.protocol_version ^= rng.gen_range(1..=u8::MAX),
                    CorruptField::InterfaceVersion => h.interface_version ^= rng.gen_range(1..=u8::MAX),
                    CorruptField::ReturnCode => h.return_code = ReturnCode::ENotOk,
                }
                *corrupted = true;
            }
        }
        FailureMode::Mixture { components } => {
            for c in components {
                apply_mode(c, p, rng, fate);
            }
        }
    }
}

/// Applies the failure signature to every packet sent by `schedule.ecu` at or
/// after the onset. Delayed or corrupted packets become `MUTATED`; dropped
/// packets are removed.
pub fn inject_failure(trace: &Trace, schedule: &FailureSchedule) -> Result<(Trace, FailureReport), FailureError> {
    if trace.topology.ecu(schedule.ecu).is_none() {
        return Err(FailureError::UnknownEcu(schedule.ecu));
    }
    schedule.mode.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut report = FailureReport::default();
    let mut out = Vec::with_capacity(trace.packets.len());
    for p in &trace.packets {
        if p.src != schedule.ecu || p.timestamp < schedule.onset_time || !schedule.scope.covers(p) {
            out.push(p.clone());
            continue;
        }
        let mut q = p.clone();
        let mut fate = Fate::Kept { delayed: false, corrupted: false };
        apply_mode(&schedule.mode, &mut q, &mut rng, &mut fate);
        match fate {
            Fate::Dropped => {
                report.dropped += 1;
                report.drop_times.push(p.timestamp);
            }
            Fate::Kept { delayed, corrupted } => {
                report.delayed += usize::from(delayed);
                report.corrupted += usize::from(corrupted);
                if delayed || corrupted {
                    q.origin = Origin::Mutated;
                }
                out.push(q);
            }
        }
    }
    let mut result = trace.with_packets(out);
    result.sort_by_time();
    Ok((result, report))
}
