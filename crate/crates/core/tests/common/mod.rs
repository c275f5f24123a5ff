//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod metrics;

use rand::seq::SliceRandom;
use rand::Rng;
use sissa_core::codec::{MessageId, MessageType, RequestId, ReturnCode, SomeIpPacket};
use sissa_core::sim::{run_sim, SimConfig};
use sissa_core::topology::Topology;
use sissa_core::trace::{Origin, Trace};

/// A valid packet with every header field and payload drawn at random.
pub fn random_packet<R: Rng>(rng: &mut R) -> SomeIpPacket {
    let len = if rng.gen_bool(0.1) { 0 } else { rng.gen_range(0..64) };
    let mut p = SomeIpPacket::new(
        MessageId::new(rng.gen(), rng.gen()),
        RequestId::new(rng.gen(), rng.gen()),
        rng.gen(),
        *MessageType::ALL.choose(rng).unwrap(),
        *ReturnCode::ALL.choose(rng).unwrap(),
        (0..len).map(|_| rng.gen()).collect(),
    );
    p.protocol_version = rng.gen();
    p
}

pub fn default_trace(duration: f64, seed: u64) -> Trace {
    run_sim(&SimConfig::new(Topology::default_topology(), duration, seed)).unwrap()
}

pub fn count_origin(t: &Trace, o: Origin) -> usize {
    t.packets.iter().filter(|p| p.origin == o).count()
}

/// Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic p-value of the one-sample KS statistic `d` over `n` samples,
/// with the Stephens small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// `1 - exp(-x)` without statrs' cancellation for tiny `x`.
pub fn one_minus_exp_neg(x: f64) -> f64 {
    if x < 1e-3 {
        x - x * x / 2.0 + x * x * x / 6.0 - x.powi(4) / 24.0 + x.powi(5) / 120.0
    } else {
        1.0 - (-x).exp()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Largest relative error of pdf, cdf and hazard against statrs and the
/// closed forms, over `points` evenly spaced times in (0, 6α].
pub fn weibull_max_rel_error(alpha: f64, beta: f64, points: usize) -> f64 {
    use sissa_core::failure::{hazard_rate, weibull_cdf, weibull_pdf, WeibullParams};
    use statrs::distribution::{Continuous, Weibull};
    let p = WeibullParams::new(alpha, beta).unwrap();
    let oracle = Weibull::new(beta, alpha).unwrap();
    let mut worst = 0.0f64;
    for i in 1..=points {
        let t = 6.0 * alpha * i as f64 / points as f64;
        let z = (t / alpha).powf(beta);
        let pdf = weibull_pdf(t, p).unwrap();
        let cdf = weibull_cdf(t, p).unwrap();
        let hz = hazard_rate(t, p).unwrap();
        worst = worst
            .max(rel_err(pdf, oracle.pdf(t)))
            .max(rel_err(cdf, one_minus_exp_neg(z)))
            .max(rel_err(hz, beta / alpha * (t / alpha).powf(beta - 1.0)));
        // survival taken exactly: a subtracted 1 - cdf keeps only
        // -log10(1 - cdf) correct digits in the tail
        if cdf < 1.0 - 1e-12 {
            worst = worst.max(rel_err(hz * (-z).exp(), pdf));
        }
    }
    worst
}

/// Requests with no later RESPONSE/ERROR for the same (client, service, session).
pub fn unpaired_requests(t: &Trace) -> usize {
    use std::collections::HashMap;
    let mut open: HashMap<(u16, u16, u16), usize> = HashMap::new();
    let mut unpaired = 0;
    for p in &t.packets {
        let key = (p.packet.request_id.client_id, p.packet.message_id.service_id, p.packet.request_id.session_id);
        match p.packet.message_type {
            MessageType::Request => *open.entry(key).or_default() += 1,
            MessageType::Response | MessageType::Error => {
                if let Some(n) = open.get_mut(&key).filter(|n| **n > 0) {
                    *n -= 1;
                }
            }
            _ => {}
        }
    }
    unpaired += open.values().sum::<usize>();
    unpaired
}

/// Packets of `t` up to (and including) the `k`-th one matching `pred`.
pub fn truncate_at<F: Fn(&sissa_core::trace::TimedPacket) -> bool>(t: &Trace, k: usize, pred: F) -> Trace {
    let mut seen = 0;
    let end = t
        .packets
        .iter()
        .position(|p| {
            seen += pred(p) as usize;
            seen == k
        })
        .expect("trace too short");
    t.with_packets(t.packets[..=end].to_vec())
}

/// Multiset difference: (packets only in `a`, packets only in `b`).
pub fn trace_diff(a: &Trace, b: &Trace) -> (usize, usize) {
    use std::collections::HashMap;
    let key = |p: &sissa_core::trace::TimedPacket| format!("{:?}", (p.timestamp.to_bits(), p.src, p.dst, &p.packet, p.origin));
    let mut counts: HashMap<String, i64> = HashMap::new();
    for p in &a.packets {
        *counts.entry(key(p)).or_default() += 1;
    }
    for p in &b.packets {
        *counts.entry(key(p)).or_default() -= 1;
    }
    let only_a = counts.values().filter(|&&c| c > 0).map(|&c| c as usize).sum();
    let only_b = counts.values().filter(|&&c| c < 0).map(|&c| (-c) as usize).sum();
    (only_a, only_b)
}
