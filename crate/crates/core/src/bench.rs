//! Per-window inference latency and model size.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sissa_nn::checkpoint;

use crate::models::{Model, ModelConfig, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub variant: String,
    pub window: usize,
    pub params: usize,
    pub checkpoint_bytes: usize,
    /// Seconds per window.
    pub mean_latency: f64,
    pub median_latency: f64,
    pub p99_latency: f64,
    pub batch_size: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub hardware: String,
}

/// CPU model, architecture and logical core count.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {}; {cores} logical cores; single-threaded inference", std::env::consts::ARCH)
}

/// Nearest-rank percentile of sorted samples, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

/// Fewest untimed inferences before timing starts.
pub const MIN_WARMUP: usize = 100;

/// `count` windows of uniform `[0, 1)` features shaped for `config`.
pub fn synthetic_windows(config: &ModelConfig, count: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..config.window * config.features).map(|_| rng.gen()).collect()).collect()
}

/// Times `repetitions` batch-1 inferences after `warmup` (at least
/// `MIN_WARMUP`) untimed ones, cycling through `windows` (each `n × d`
/// row-major).
pub fn benchmark(
    model: &Model,
    windows: &[Vec<f32>],
    warmup: usize,
    repetitions: usize,
) -> Result<(OverheadReport, Vec<f64>), ModelError> {
    if windows.is_empty() || repetitions == 0 || warmup < MIN_WARMUP {
        return Err(ModelError::Config(format!(
            "benchmark needs windows, at least one repetition and {MIN_WARMUP} warm-up runs"
        )));
    }
    for i in 0..warmup {
        std::hint::black_box(model.logits(&windows[i % windows.len()], 1)?);
    }
    let mut samples = Vec::with_capacity(repetitions);
    for i in 0..repetitions {
        let w = &windows[i % windows.len()];
        let t = Instant::now();
        std::hint::black_box(model.logits(w, 1)?);
        // floor at 1 ns so latencies stay positive on coarse clocks
        samples.push(t.elapsed().as_secs_f64().max(1e-9));
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let bytes = checkpoint::to_bytes(&model.store, serde_json::to_value(&model.config).map_err(sissa_nn::NnError::from)?)?;
    let report = OverheadReport {
        variant: model.config.variant.name().to_string(),
        window: model.config.window,
        params: model.count_params(),
        checkpoint_bytes: bytes.len(),
        mean_latency: samples.iter().sum::<f64>() / samples.len() as f64,
        median_latency: median(&sorted),
        p99_latency: percentile(&sorted, 0.99),
        batch_size: 1,
        warmup,
        repetitions,
        hardware: hardware_descriptor(),
    };
    Ok((report, samples))
}

pub fn reports_csv(reports: &[OverheadReport]) -> String {
    let mut s = String::from("variant,window,params,checkpoint_bytes,mean_s,median_s,p99_s,batch_size,repetitions\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.window,
            r.params,
            r.checkpoint_bytes,
            r.mean_latency,
            r.median_latency,
            r.p99_latency,
            r.batch_size,
            r.repetitions
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&s, 0.99), 99.0);
        assert_eq!(percentile(&s, 1.0), 100.0);
        assert_eq!(median(&s), 50.5);
        assert_eq!(median(&[3.0]), 3.0);
    }

    #[test]
    fn benchmark_reports_every_repetition() {
        let m = Model::new(ModelConfig { variant: crate::models::Variant::C, ..Default::default() }, 0).unwrap();
        let ws = synthetic_windows(&m.config, 4, 1);
        let (r, samples) = benchmark(&m, &ws, MIN_WARMUP, 1000).unwrap();
        assert_eq!(samples.len(), 1000);
        assert_eq!(r.params, m.count_params());
        assert!(r.median_latency > 0.0 && r.p99_latency >= r.median_latency);
        assert!(!r.hardware.is_empty());
        assert!(benchmark(&m, &ws, 10, 5).is_err());
    }
}
