//! ECUs and the services they provide.

use std::collections::HashSet;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("topology has no ECUs")]
    Empty,
    #[error("duplicate ECU id {0}")]
    DuplicateId(u16),
    #[error("duplicate ECU address {0}")]
    DuplicateAddress(Ipv4Addr),
    #[error("duplicate service id 0x{0:04x}")]
    DuplicateService(u16),
    #[error("service 0x{service:04x} references unknown ECU {ecu}")]
    UnknownEcu { service: u16, ecu: u16 },
    #[error("service 0x{0:04x}: {1}")]
    InvalidBinding(u16, String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ecu {
    pub id: u16,
    pub address: Ipv4Addr,
    pub port: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    RequestResponse,
    FireForget,
    Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventStrategy {
    /// Publish every `period` seconds after subscription.
    Periodic { period: f64 },
    /// Publish at exponentially distributed intervals with this mean.
    OnChange { mean_interval: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceBinding {
    pub provider: u16,
    pub service_id: u16,
    pub methods: Vec<u16>,
    pub pattern: Pattern,
    /// Required for, and only allowed with, [`Pattern::Event`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_strategy: Option<EventStrategy>,
    /// Calling clients, or subscribers for events.
    pub clients: Vec<u16>,
    #[serde(default = "default_interface_version")]
    pub interface_version: u8,
    /// Inclusive payload length range in bytes.
    #[serde(default = "default_payload_len")]
    pub payload_len: [usize; 2],
}

fn default_interface_version() -> u8 {
    1
}

fn default_payload_len() -> [usize; 2] {
    [4, 16]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub ecus: Vec<Ecu>,
    pub services: Vec<ServiceBinding>,
}

impl Topology {
    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.ecus.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut ids = HashSet::new();
        let mut addrs = HashSet::new();
        for e in &self.ecus {
            if !ids.insert(e.id) {
                return Err(TopologyError::DuplicateId(e.id));
            }
            if !addrs.insert(e.address) {
                return Err(TopologyError::DuplicateAddress(e.address));
            }
        }
        let mut services = HashSet::new();
        for s in &self.services {
            let bad = |msg: &str| Err(TopologyError::InvalidBinding(s.service_id, msg.to_string()));
            if !services.insert(s.service_id) {
                return Err(TopologyError::DuplicateService(s.service_id));
            }
            for &ecu in std::iter::once(&s.provider).chain(&s.clients) {
                if !ids.contains(&ecu) {
                    return Err(TopologyError::UnknownEcu { service: s.service_id, ecu });
                }
            }
            if s.methods.is_empty() {
                return bad("methods must be non-empty");
            }
            if s.clients.contains(&s.provider) {
                return bad("provider cannot be its own client");
            }
            if s.payload_len[0] > s.payload_len[1] {
                return bad("payload_len range is inverted");
            }
            match (s.pattern, s.event_strategy) {
                (Pattern::Event, None) => return bad("event binding needs an event_strategy"),
                (Pattern::Event, Some(EventStrategy::Periodic { period })) if !(period > 0.0) => {
                    return bad("period must be positive")
                }
                (Pattern::Event, Some(EventStrategy::OnChange { mean_interval })) if !(mean_interval > 0.0) => {
                    return bad("mean_interval must be positive")
                }
                (Pattern::RequestResponse | Pattern::FireForget, Some(_)) => {
                    return bad("event_strategy is only valid for event bindings")
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn ecu(&self, id: u16) -> Option<&Ecu> {
        self.ecus.iter().find(|e| e.id == id)
    }

    pub fn ecu_index(&self, id: u16) -> Option<usize> {
        self.ecus.iter().position(|e| e.id == id)
    }

    pub fn ecu_ids(&self) -> Vec<u16> {
        self.ecus.iter().map(|e| e.id).collect()
    }

    pub fn binding(&self, service_id: u16) -> Option<&ServiceBinding> {
        self.services.iter().find(|s| s.service_id == service_id)
    }

    /// Whether `a` and `b` may exchange traffic under some binding.
    pub fn connected(&self, a: u16, b: u16) -> bool {
        self.services.iter().any(|s| {
            (s.provider == a && s.clients.contains(&b)) || (s.provider == b && s.clients.contains(&a))
        })
    }

    /// Five ECUs with two request/response services, one fire-and-forget
    /// service, one periodic event and one on-change event.
    pub fn default_topology() -> Self {
        let ecus = (1..=5u16)
            .map(|id| Ecu { id, address: Ipv4Addr::new(10, 0, 0, id as u8), port: 30490 + id })
            .collect();
        let binding = |provider, service_id, methods: &[u16], pattern, event_strategy, clients: &[u16], payload_len| {
            ServiceBinding {
                provider,
                service_id,
                methods: methods.to_vec(),
                pattern,
                event_strategy,
                clients: clients.to_vec(),
                interface_version: 1,
                payload_len,
            }
        };
        let services = vec![
            binding(1, 0x1001, &[0x0001, 0x0002, 0x0003], Pattern::RequestResponse, None, &[2, 3, 4], [4, 16]),
            binding(2, 0x1002, &[0x0001, 0x0002], Pattern::RequestResponse, None, &[1, 5], [8, 24]),
            binding(3, 0x1003, &[0x0001], Pattern::FireForget, None, &[4, 5], [2, 8]),
            binding(
                4,
                0x2001,
                &[0x8001],
                Pattern::Event,
                Some(EventStrategy::Periodic { period: 0.05 }),
                &[1, 2],
                [8, 8],
            ),
            binding(
                5,
                0x2002,
                &[0x8002],
                Pattern::Event,
                Some(EventStrategy::OnChange { mean_interval: 0.1 }),
                &[3],
                [4, 12],
            ),
        ];
        Self { ecus, services }
    }
}
