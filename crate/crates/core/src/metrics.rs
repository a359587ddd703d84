//! Latency/throughput/memory reporting shared by the scheduler and the
//! benchmark harness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::beam::SelectionStats;
use crate::error::{Error, Result};
use crate::kvcache::MemoryStats;
use crate::scheduler::{PhaseSpan, RequestOutput};

/// Nearest-rank percentile: the value at index `ceil(p/100 * n)` (1-based)
/// of the ascending sample.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Input(format!("percentile {p} out of [0, 100]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Peak per-request slot footprints plus total block copies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryAggregate {
    pub shared_slots_peak: u64,
    pub unshared_slots_peak: u64,
    pub baseline_slots_peak: u64,
    pub block_copies_total: u64,
}

impl MemoryAggregate {
    pub fn fold(&mut self, m: &MemoryStats) {
        self.shared_slots_peak = self.shared_slots_peak.max(m.shared_token_slots);
        self.unshared_slots_peak = self.unshared_slots_peak.max(m.unshared_token_slots);
        self.baseline_slots_peak = self.baseline_slots_peak.max(m.baseline_token_slots);
        self.block_copies_total += m.block_copies;
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub completed: u64,
    pub rejected: u64,
    pub failed: u64,
    pub latency_avg_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub throughput_rps: f64,
    pub emitted_items: u64,
    pub invalid_items: u64,
    pub invalid_rate: f64,
    pub memory: MemoryAggregate,
    /// Total microseconds spent per phase kind, summed over requests.
    pub phase_breakdown_us: BTreeMap<String, u64>,
    pub selection: SelectionStats,
    pub slo_p99_target_us: u64,
    pub slo_violated: bool,
    /// Set when a drain timed out with work still in flight.
    pub partial: bool,
}

/// Aggregate request outputs and phase spans into a report. Latencies are
/// recomputed from the trace timestamps (completion minus arrival).
pub fn build_report(
    outputs: &[RequestOutput],
    spans: &[PhaseSpan],
    rejected: u64,
    slo_p99_target_us: u64,
) -> MetricsReport {
    let mut report = MetricsReport {
        rejected,
        slo_p99_target_us,
        ..Default::default()
    };

    let mut latencies_ms = Vec::new();
    let mut first_arrival = u64::MAX;
    let mut last_completion = 0u64;
    for out in outputs {
        if out.error.is_some() {
            report.failed += 1;
            continue;
        }
        report.completed += 1;
        latencies_ms.push((out.completion_us.saturating_sub(out.arrival_us)) as f64 / 1000.0);
        first_arrival = first_arrival.min(out.arrival_us);
        last_completion = last_completion.max(out.completion_us);
        report.emitted_items += out.items.len() as u64;
        report.invalid_items += out.invalid_items;
        report.memory.fold(&out.memory);
        report.selection.accumulate(&out.selection);
    }
    if !latencies_ms.is_empty() {
        report.latency_avg_ms = latencies_ms.iter().sum::<f64>() / latencies_ms.len() as f64;
        report.latency_p50_ms = percentile(&latencies_ms, 50.0).expect("non-empty");
        report.latency_p99_ms = percentile(&latencies_ms, 99.0).expect("non-empty");
        let makespan_s = (last_completion.saturating_sub(first_arrival)) as f64 / 1e6;
        report.throughput_rps = if makespan_s > 0.0 {
            report.completed as f64 / makespan_s
        } else {
            report.completed as f64
        };
        report.slo_violated = report.latency_p99_ms * 1000.0 > slo_p99_target_us as f64;
    }
    if report.emitted_items > 0 {
        report.invalid_rate = report.invalid_items as f64 / report.emitted_items as f64;
    }
    for span in spans {
        let kind = span.phase.split(':').next().unwrap_or(&span.phase).to_string();
        *report.phase_breakdown_us.entry(kind).or_insert(0) +=
            span.end_us.saturating_sub(span.start_us);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        let samples: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&samples, 99.0).unwrap(), 99.0);
        assert_eq!(percentile(&samples, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&samples, 100.0).unwrap(), 100.0);
    }

    #[test]
    fn percentile_single_sample() {
        for p in [1.0, 50.0, 99.0] {
            assert_eq!(percentile(&[42.0], p).unwrap(), 42.0);
        }
    }

    #[test]
    fn percentile_empty_is_error() {
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn percentile_matches_independent_sort() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) % 10_000) as f64 / 10.0
        };
        let samples: Vec<f64> = (0..1000).map(|_| next()).collect();
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        for p in [1.0, 25.0, 50.0, 90.0, 99.0] {
            let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
            assert_eq!(percentile(&samples, p).unwrap(), sorted[rank - 1]);
        }
    }
}
