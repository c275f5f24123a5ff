//! Virtual-clock simulation of request/response, fire-and-forget and event traffic.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{MessageId, MessageType, RequestId, ReturnCode, SomeIpPacket};
use crate::topology::{EventStrategy, Pattern, ServiceBinding, Topology, TopologyError};
use crate::trace::{Origin, TimedPacket, Trace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("ECU {client} has no {expected} binding for service 0x{service:04x}")]
    NoBinding { client: u16, service: u16, expected: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub topology: Topology,
    /// Seconds of simulated time.
    pub duration: f64,
    /// Mean of the exponential inter-arrival time of each client's calls.
    pub mean_request_interval: f64,
    /// Uniform service latency range in seconds.
    #[serde(default = "default_latency")]
    pub latency: [f64; 2],
    /// Events are delayed by a uniform draw from `[0, event_jitter]`.
    #[serde(default)]
    pub event_jitter: f64,
    /// Subscribers renew their subscription at this interval.
    #[serde(default)]
    pub resubscribe_interval: Option<f64>,
    pub seed: u64,
}

pub fn default_latency() -> [f64; 2] {
    [0.001, 0.005]
}

impl SimConfig {
    pub fn new(topology: Topology, duration: f64, seed: u64) -> Self {
        Self {
            topology,
            duration,
            mean_request_interval: 0.05,
            latency: default_latency(),
            event_jitter: 0.0,
            resubscribe_interval: None,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        self.topology.validate()?;
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return bad("duration must be finite and non-negative");
        }
        if !(self.mean_request_interval > 0.0) {
            return bad("mean_request_interval must be positive");
        }
        if !(self.latency[0] > 0.0 && self.latency[0] <= self.latency[1]) {
            return bad("latency must be a positive, non-inverted range");
        }
        if !(self.event_jitter >= 0.0) {
            return bad("event_jitter must be non-negative");
        }
        if matches!(self.resubscribe_interval, Some(r) if !(r > 0.0)) {
            return bad("resubscribe_interval must be positive");
        }
        Ok(())
    }
}

/// Session counters and randomness shared by the communication steps.
pub struct Simulator {
    topology: Topology,
    rng: ChaCha8Rng,
    latency: [f64; 2],
    event_jitter: f64,
    sessions: HashMap<(u16, u16), u16>,
    event_sessions: HashMap<(u16, u16), u16>,
}

fn bump(counter: &mut u16) -> u16 {
    // 0 is reserved; wrap from 0xFFFF back to 1
    *counter = if *counter == u16::MAX { 1 } else { *counter + 1 };
    *counter
}

impl Simulator {
    pub fn new(topology: Topology, seed: u64) -> Result<Self, SimError> {
        topology.validate()?;
        Ok(Self {
            topology,
            rng: ChaCha8Rng::seed_from_u64(seed),
            latency: default_latency(),
            event_jitter: 0.0,
            sessions: HashMap::new(),
            event_sessions: HashMap::new(),
        })
    }

    fn from_config(cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut sim = Self::new(cfg.topology.clone(), cfg.seed)?;
        sim.latency = cfg.latency;
        sim.event_jitter = cfg.event_jitter;
        Ok(sim)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Next session id of `client` towards `service`: 1, 2, ... wrapping to 1.
    pub fn next_session(&mut self, client: u16, service: u16) -> u16 {
        bump(self.sessions.entry((client, service)).or_insert(0))
    }

    fn binding_for(&self, client: u16, service: u16, pattern: Pattern, expected: &'static str) -> Result<ServiceBinding, SimError> {
        self.topology
            .binding(service)
            .filter(|b| b.pattern == pattern && b.clients.contains(&client))
            .cloned()
            .ok_or(SimError::NoBinding { client, service, expected })
    }

    fn payload(&mut self, b: &ServiceBinding) -> Vec<u8> {
        let len = self.rng.gen_range(b.payload_len[0]..=b.payload_len[1]);
        (0..len).map(|_| self.rng.gen()).collect()
    }

    fn latency(&mut self) -> f64 {
        let [lo, hi] = self.latency;
        if lo == hi {
            lo
        } else {
            self.rng.gen_range(lo..hi)
        }
    }

    pub fn step_request_response(
        &mut self,
        t: f64,
        client: u16,
        service: u16,
        method: u16,
    ) -> Result<(TimedPacket, TimedPacket), SimError> {
        let b = self.binding_for(client, service, Pattern::RequestResponse, "request/response")?;
        let session = self.next_session(client, service);
        let mid = MessageId::new(service, method);
        let rid = RequestId::new(client, session);
        let req_payload = self.payload(&b);
        let res_payload = self.payload(&b);
        let req = SomeIpPacket::new(mid, rid, b.interface_version, MessageType::Request, ReturnCode::EOk, req_payload);
        let res = SomeIpPacket::new(mid, rid, b.interface_version, MessageType::Response, ReturnCode::EOk, res_payload);
        let t_res = t + self.latency();
        Ok((
            TimedPacket { timestamp: t, src: client, dst: b.provider, packet: req, origin: Origin::Legit },
            TimedPacket { timestamp: t_res, src: b.provider, dst: client, packet: res, origin: Origin::Legit },
        ))
    }

    pub fn step_fire_forget(&mut self, t: f64, client: u16, service: u16, method: u16) -> Result<TimedPacket, SimError> {
        let b = self.binding_for(client, service, Pattern::FireForget, "fire-and-forget")?;
        let session = self.next_session(client, service);
        let payload = self.payload(&b);
        let packet = SomeIpPacket::new(
            MessageId::new(service, method),
            RequestId::new(client, session),
            b.interface_version,
            MessageType::RequestNoReturn,
            ReturnCode::EOk,
            payload,
        );
        Ok(TimedPacket { timestamp: t, src: client, dst: b.provider, packet, origin: Origin::Legit })
    }

    /// Subscription notification from `subscriber` to the event provider.
    pub fn subscription(&mut self, t: f64, subscriber: u16, service: u16) -> Result<TimedPacket, SimError> {
        let b = self.binding_for(subscriber, service, Pattern::Event, "event")?;
        let session = self.next_session(subscriber, service);
        let packet = SomeIpPacket::new(
            MessageId::new(service, b.methods[0]),
            RequestId::new(subscriber, session),
            b.interface_version,
            MessageType::Notification,
            ReturnCode::EOk,
            Vec::new(),
        );
        Ok(TimedPacket { timestamp: t, src: subscriber, dst: b.provider, packet, origin: Origin::Legit })
    }

    /// A subscription at `t_subscribe` followed by every event published to
    /// the subscriber up to and including `until`.
    pub fn step_event_cycle(
        &mut self,
        subscriber: u16,
        service: u16,
        t_subscribe: f64,
        until: f64,
    ) -> Result<Vec<TimedPacket>, SimError> {
        let sub = self.subscription(t_subscribe, subscriber, service)?;
        let b = self.binding_for(subscriber, service, Pattern::Event, "event")?;
        let mut out = vec![sub];
        let mut times = Vec::new();
        match b.event_strategy.expect("validated event binding") {
            EventStrategy::Periodic { period } => {
                // multiples of the period, not accumulated sums, so the grid is exact
                let mut k = 1u64;
                loop {
                    let t = t_subscribe + k as f64 * period;
                    if t > until {
                        break;
                    }
                    times.push(t);
                    k += 1;
                }
            }
            EventStrategy::OnChange { mean_interval } => {
                let exp = Exp::new(1.0 / mean_interval).expect("positive rate");
                let mut t = t_subscribe;
                loop {
                    t += exp.sample(&mut self.rng);
                    if t > until {
                        break;
                    }
                    times.push(t);
                }
            }
        }
        for t in times {
            let jitter = if self.event_jitter > 0.0 { self.rng.gen_range(0.0..self.event_jitter) } else { 0.0 };
            let method = *b.methods.choose(&mut self.rng).unwrap();
            let session = bump(self.event_sessions.entry((service, subscriber)).or_insert(0));
            let payload = self.payload(&b);
            let packet = SomeIpPacket::new(
                MessageId::new(service, method),
                RequestId::new(0, session),
                b.interface_version,
                MessageType::Notification,
                ReturnCode::EOk,
                payload,
            );
            out.push(TimedPacket { timestamp: t + jitter, src: b.provider, dst: subscriber, packet, origin: Origin::Legit });
        }
        Ok(out)
    }
}

/// Runs every flow of the topology over `[0, duration]`.
///
/// Responses to calls made before `duration` are kept even if they arrive
/// after it, so attack-free traces pair every request.
pub fn run_sim(cfg: &SimConfig) -> Result<Trace, SimError> {
    let mut sim = Simulator::from_config(cfg)?;
    let mut tagged: Vec<(f64, usize, TimedPacket)> = Vec::new();
    let push = |p: TimedPacket, tagged: &mut Vec<(f64, usize, TimedPacket)>| {
        let seq = tagged.len();
        tagged.push((p.timestamp, seq, p));
    };
    let arrivals = Exp::new(1.0 / cfg.mean_request_interval).expect("validated rate");
    for b in cfg.topology.services.clone() {
        for &client in &b.clients {
            match b.pattern {
                Pattern::RequestResponse | Pattern::FireForget => {
                    let mut t = 0.0;
                    loop {
                        t += arrivals.sample(&mut sim.rng);
                        if t > cfg.duration {
                            break;
                        }
                        let method = *b.methods.choose(&mut sim.rng).unwrap();
                        if b.pattern == Pattern::RequestResponse {
                            let (req, res) = sim.step_request_response(t, client, b.service_id, method)?;
                            push(req, &mut tagged);
                            push(res, &mut tagged);
                        } else {
                            let p = sim.step_fire_forget(t, client, b.service_id, method)?;
                            push(p, &mut tagged);
                        }
                    }
                }
                Pattern::Event => {
                    if cfg.duration <= 0.0 {
                        continue;
                    }
                    for p in sim.step_event_cycle(client, b.service_id, 0.0, cfg.duration)? {
                        push(p, &mut tagged);
                    }
                    if let Some(r) = cfg.resubscribe_interval {
                        let mut k = 1u64;
                        while k as f64 * r <= cfg.duration {
                            let p = sim.subscription(k as f64 * r, client, b.service_id)?;
                            push(p, &mut tagged);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut trace = Trace::new(cfg.topology.clone(), cfg.seed);
    trace.packets = tagged.into_iter().map(|(_, _, p)| p).collect();
    Ok(trace)
}
