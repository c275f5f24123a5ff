//! The five attack scenarios as deterministic trace transformations.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{MessageId, MessageType, RequestId, ReturnCode, SomeIpPacket};
use crate::topology::{Pattern, ServiceBinding};
use crate::trace::{Origin, TimedPacket, Trace};

/// Offset of an injected duplicate after its original, in seconds.
pub const DUPLICATE_OFFSET: f64 = 10e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttackKind {
    RequestWithoutResponse,
    FakeInterface,
    FakeSource,
    Ddos,
    ResponseWithoutRequest,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("{0:?}: no eligible packets in trace")]
    NoEligible(AttackKind),
    #[error("fake source needs at least two ECU addresses")]
    InsufficientAddresses,
    #[error("invalid attack parameters: {0}")]
    Params(String),
}

/// Restricts an attack to traffic of one ECU and/or one service.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackTarget {
    /// Packets sent or received by this ECU.
    #[serde(default)]
    pub ecu: Option<u16>,
    #[serde(default)]
    pub service: Option<u16>,
}

impl AttackTarget {
    fn matches(&self, p: &TimedPacket) -> bool {
        self.ecu.is_none_or(|e| p.src == e || p.dst == e)
            && self.service.is_none_or(|s| p.packet.message_id.service_id == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub kind: AttackKind,
    /// Share of eligible packets, in (0, 1]; the rate multiplier (> 1) for DDoS.
    pub intensity: f64,
    #[serde(default)]
    pub target: AttackTarget,
    pub seed: u64,
}

impl AttackParams {
    pub fn new(kind: AttackKind, intensity: f64, seed: u64) -> Self {
        Self { kind, intensity, target: AttackTarget::default(), seed }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let ok = match self.kind {
            AttackKind::Ddos => self.intensity > 1.0 && self.intensity.is_finite(),
            _ => self.intensity > 0.0 && self.intensity <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(AttackError::Params(format!("intensity {} out of range for {:?}", self.intensity, self.kind)))
        }
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowCounts {
    pub dropped: usize,
    pub injected: usize,
    pub mutated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub packets_dropped: usize,
    pub packets_injected: usize,
    pub packets_mutated: usize,
    /// Keyed by `"src->dst/0xSERVICE"`.
    pub per_flow: BTreeMap<String, FlowCounts>,
    /// Timestamps of removed packets.
    pub drop_times: Vec<f64>,
}

impl AttackReport {
    fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            packets_dropped: 0,
            packets_injected: 0,
            packets_mutated: 0,
            per_flow: BTreeMap::new(),
            drop_times: Vec::new(),
        }
    }

    fn flow(&mut self, p: &TimedPacket) -> &mut FlowCounts {
        let key = format!("{}->{}/0x{:04x}", p.src, p.dst, p.packet.message_id.service_id);
        self.per_flow.entry(key).or_default()
    }

    fn dropped(&mut self, p: &TimedPacket) {
        self.packets_dropped += 1;
        self.drop_times.push(p.timestamp);
        self.flow(p).dropped += 1;
    }

    fn injected(&mut self, p: &TimedPacket) {
        self.packets_injected += 1;
        self.flow(p).injected += 1;
    }
}

fn finish(trace: &Trace, packets: Vec<TimedPacket>) -> Trace {
    let mut t = trace.with_packets(packets);
    t.sort_by_time();
    t
}

fn random_payload(rng: &mut ChaCha8Rng, b: Option<&ServiceBinding>) -> Vec<u8> {
    let [lo, hi] = b.map_or([4, 16], |b| b.payload_len);
    let len = rng.gen_range(lo..=hi);
    (0..len).map(|_| rng.gen()).collect()
}

/// `round(fraction * n)` distinct indices in increasing order.
fn choose_fraction(rng: &mut ChaCha8Rng, n: usize, fraction: f64) -> Vec<usize> {
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn is_response(p: &TimedPacket) -> bool {
    p.packet.message_type == MessageType::Response
}

/// Removes each eligible response with probability `intensity`.
pub fn inject_request_without_response(trace: &Trace, params: &AttackParams) -> Result<(Trace, AttackReport), AttackError> {
    params.validate()?;
    let mut rng = params.rng();
    let mut report = AttackReport::new(AttackKind::RequestWithoutResponse);
    let mut eligible = 0;
    let mut out = Vec::with_capacity(trace.packets.len());
    for p in &trace.packets {
        if is_response(p) && params.target.matches(p) {
            eligible += 1;
            if rng.gen::<f64>() < params.intensity {
                report.dropped(p);
                continue;
            }
        }
        out.push(p.clone());
    }
    if eligible == 0 {
        return Err(AttackError::NoEligible(AttackKind::RequestWithoutResponse));
    }
    Ok((finish(trace, out), report))
}

/// Duplicates targeted responses with a different interface version.
pub fn inject_fake_interface(trace: &Trace, params: &AttackParams) -> Result<(Trace, AttackReport), AttackError> {
    params.validate()?;
    let mut rng = params.rng();
    let mut report = AttackReport::new(AttackKind::FakeInterface);
    let eligible: Vec<usize> =
        (0..trace.packets.len()).filter(|&i| is_response(&trace.packets[i]) && params.target.matches(&trace.packets[i])).collect();
    if eligible.is_empty() {
        return Err(AttackError::NoEligible(AttackKind::FakeInterface));
    }
    let mut out = trace.packets.clone();
    for k in choose_fraction(&mut rng, eligible.len(), params.intensity) {
        let mut fake = trace.packets[eligible[k]].clone();
        fake.timestamp += DUPLICATE_OFFSET;
        fake.packet.interface_version ^= rng.gen_range(1..=u8::MAX);
        fake.origin = Origin::Injected;
        report.injected(&fake);
        out.push(fake);
    }
    Ok((finish(trace, out), report))
}

/// Replays targeted packets from a different legal source ECU.
pub fn inject_fake_source(trace: &Trace, params: &AttackParams) -> Result<(Trace, AttackReport), AttackError> {
    params.validate()?;
    let ids = trace.topology.ecu_ids();
    if ids.len() < 2 {
        return Err(AttackError::InsufficientAddresses);
    }
    let mut rng = params.rng();
    let mut report = AttackReport::new(AttackKind::FakeSource);
    let eligible: Vec<usize> = (0..trace.packets.len())
        .filter(|&i| trace.packets[i].origin == Origin::Legit && params.target.matches(&trace.packets[i]))
        .collect();
    if eligible.is_empty() {
        return Err(AttackError::NoEligible(AttackKind::FakeSource));
    }
    let mut out = trace.packets.clone();
    for k in choose_fraction(&mut rng, eligible.len(), params.intensity) {
        let mut fake = trace.packets[eligible[k]].clone();
        let others: Vec<u16> = ids.iter().copied().filter(|&id| id != fake.src).collect();
        fake.src = *others.choose(&mut rng).unwrap();
        fake.timestamp += DUPLICATE_OFFSET;
        fake.origin = Origin::Injected;
        report.injected(&fake);
        out.push(fake);
    }
    Ok((finish(trace, out), report))
}

/// Server and service under attack: the target if given, otherwise the
/// request/response service receiving the most requests.
fn ddos_target(trace: &Trace, target: &AttackTarget) -> Option<(u16, u16)> {
    let mut counts: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    for p in &trace.packets {
        if p.packet.message_type == MessageType::Request && p.origin == Origin::Legit {
            *counts.entry((p.dst, p.packet.message_id.service_id)).or_default() += 1;
        }
    }
    let rr = |server: u16, service: u16| {
        trace.topology.binding(service).is_some_and(|b| b.provider == server && b.pattern == Pattern::RequestResponse)
    };
    let candidates = trace.topology.services.iter().filter(|b| b.pattern == Pattern::RequestResponse).filter(|b| {
        target.ecu.is_none_or(|e| e == b.provider) && target.service.is_none_or(|s| s == b.service_id)
    });
    candidates
        .map(|b| (b.provider, b.service_id))
        .filter(|&(e, s)| rr(e, s))
        .max_by_key(|k| (counts.get(k).copied().unwrap_or(0), std::cmp::Reverse(*k)))
}

/// Floods one server with requests at `intensity` times the legitimate
/// rate; the server then loses each legitimate response with probability
/// `1 - 1/intensity`.
pub fn inject_ddos(trace: &Trace, params: &AttackParams) -> Result<(Trace, AttackReport), AttackError> {
    params.validate()?;
    let m = params.intensity;
    let mut rng = params.rng();
    let mut report = AttackReport::new(AttackKind::Ddos);
    let Some((server, service)) = ddos_target(trace, &params.target) else {
        return Ok((trace.clone(), report));
    };
    let binding = trace.topology.binding(service).cloned();
    let drop_prob = 1.0 - 1.0 / m;
    let mut out = Vec::with_capacity(trace.packets.len());
    let mut legit_requests = 0usize;
    for p in &trace.packets {
        if p.dst == server && p.packet.message_id.service_id == service && p.packet.message_type == MessageType::Request {
            legit_requests += 1;
        }
        if p.src == server && is_response(p) && p.origin == Origin::Legit && rng.gen::<f64>() < drop_prob {
            report.dropped(p);
            continue;
        }
        out.push(p.clone());
    }
    let (Some(first), Some(last)) = (trace.packets.first(), trace.packets.last()) else {
        return Ok((trace.clone(), report));
    };
    let span = last.timestamp - first.timestamp;
    if legit_requests > 0 && span > 0.0 {
        let rate = m * legit_requests as f64 / span;
        let exp = Exp::new(rate).expect("positive rate");
        let attackers: Vec<u16> = trace.topology.ecu_ids().into_iter().filter(|&id| id != server).collect();
        let attacker = attackers.choose(&mut rng).copied().unwrap_or(server);
        let methods = binding.as_ref().map_or(vec![1], |b| b.methods.clone());
        let iface = binding.as_ref().map_or(1, |b| b.interface_version);
        let mut session: u16 = rng.gen_range(1..=u16::MAX);
        let mut t = first.timestamp;
        loop {
            t += exp.sample(&mut rng);
            if t > last.timestamp {
                break;
            }
            let method = *methods.choose(&mut rng).unwrap();
            let packet = SomeIpPacket::new(
                MessageId::new(service, method),
                RequestId::new(attacker, session),
                iface,
                MessageType::Request,
                ReturnCode::EOk,
                random_payload(&mut rng, binding.as_ref()),
            );
            session = if session == u16::MAX { 1 } else { session + 1 };
            let fake = TimedPacket { timestamp: t, src: attacker, dst: server, packet, origin: Origin::Injected };
            report.injected(&fake);
            out.push(fake);
        }
    }
    Ok((finish(trace, out), report))
}

/// One request of a client/service flow before which a spoofed response can
/// be placed: the client has no outstanding request at that point.
struct Slot {
    request: usize,
    gap_start: f64,
}

fn response_slots(trace: &Trace, target: &AttackTarget) -> Vec<Slot> {
    let pk = &trace.packets;
    let start = pk.first().map_or(0.0, |p| p.timestamp);
    // flow -> (time of last flow packet, answer time of the last request)
    let mut flows: HashMap<(u16, u16), (f64, Option<f64>)> = HashMap::new();
    let mut answers: HashMap<(u16, u16, u16), f64> = HashMap::new();
    for p in pk.iter().filter(|p| is_response(p)) {
        let rid = p.packet.request_id;
        answers.entry((rid.client_id, p.packet.message_id.service_id, rid.session_id)).or_insert(p.timestamp);
    }
    let mut slots = Vec::new();
    for (i, p) in pk.iter().enumerate() {
        let service = p.packet.message_id.service_id;
        let rr = trace.topology.binding(service).is_some_and(|b| b.pattern == Pattern::RequestResponse);
        if !rr || p.origin != Origin::Legit {
            continue;
        }
        let client = match p.packet.message_type {
            MessageType::Request => p.src,
            MessageType::Response | MessageType::Error => p.dst,
            _ => continue,
        };
        let entry = flows.entry((client, service)).or_insert((start, None));
        if p.packet.message_type == MessageType::Request {
            let idle = entry.1.is_none_or(|answered| answered <= p.timestamp);
            if idle && target.matches(p) {
                slots.push(Slot { request: i, gap_start: entry.0 });
            }
            let rid = p.packet.request_id;
            entry.1 = Some(answers.get(&(rid.client_id, service, rid.session_id)).copied().unwrap_or(f64::INFINITY));
        }
        entry.0 = p.timestamp;
    }
    slots
}

/// Sends spoofed responses, in the server's name, carrying the session the
/// client is about to use, just before that request goes out.
pub fn inject_response_without_request(trace: &Trace, params: &AttackParams) -> Result<(Trace, AttackReport), AttackError> {
    params.validate()?;
    let mut rng = params.rng();
    let mut report = AttackReport::new(AttackKind::ResponseWithoutRequest);
    let slots = response_slots(trace, &params.target);
    if slots.is_empty() {
        return Err(AttackError::NoEligible(AttackKind::ResponseWithoutRequest));
    }
    let mut out = trace.packets.clone();
    for k in choose_fraction(&mut rng, slots.len(), params.intensity) {
        let slot = &slots[k];
        let req = &trace.packets[slot.request];
        let t_req = req.timestamp;
        // prefer the moment right after a notification seen by the client
        let notif = trace.packets[..slot.request]
            .iter()
            .rev()
            .take_while(|p| p.timestamp > slot.gap_start)
            .find(|p| p.packet.message_type == MessageType::Notification && (p.dst == req.src || p.src == req.src))
            .map(|p| p.timestamp);
        let t = match notif {
            Some(tn) if tn + DUPLICATE_OFFSET < t_req => tn + DUPLICATE_OFFSET,
            Some(tn) => 0.5 * (tn + t_req),
            None if slot.gap_start < t_req => rng.gen_range(slot.gap_start..t_req),
            None => t_req,
        };
        let binding = trace.topology.binding(req.packet.message_id.service_id);
        let packet = SomeIpPacket::new(
            req.packet.message_id,
            req.packet.request_id,
            req.packet.interface_version,
            MessageType::Response,
            ReturnCode::EOk,
            random_payload(&mut rng, binding),
        );
        let fake = TimedPacket { timestamp: t.min(t_req), src: req.dst, dst: req.src, packet, origin: Origin::Injected };
        report.injected(&fake);
        out.push(fake);
    }
    // injected responses must precede their request even at equal timestamps
    let mut t = trace.with_packets(out);
    t.packets.sort_by(|a, b| {
        a.timestamp.total_cmp(&b.timestamp).then_with(|| (b.origin == Origin::Injected).cmp(&(a.origin == Origin::Injected)))
    });
    Ok((t, report))
}

pub fn apply_attack(trace: &Trace, params: &AttackParams) -> Result<(Trace, AttackReport), AttackError> {
    match params.kind {
        AttackKind::RequestWithoutResponse => inject_request_without_response(trace, params),
        AttackKind::FakeInterface => inject_fake_interface(trace, params),
        AttackKind::FakeSource => inject_fake_source(trace, params),
        AttackKind::Ddos => inject_ddos(trace, params),
        AttackKind::ResponseWithoutRequest => inject_response_without_request(trace, params),
    }
}
