//! CSV and JSON export with a stable column order.
//!
//! Report rows share one schema: config columns
//! `rps,bw,k,nd,lanes,masking,overlap,cache_mode` followed by metric
//! columns `avg_ms,p50_ms,p99_ms,throughput_rps,invalid_rate,
//! shared_slots,unshared_slots,baseline_slots,block_copies`.

use std::fmt::Write as _;

use crate::error::Result;
use crate::harness::studies::{AblationRow, KernelRow, MemoryRow, SweepRow};
use crate::metrics::MetricsReport;
use crate::scheduler::CacheMode;

pub const REPORT_HEADER: &str = "rps,bw,k,nd,lanes,masking,overlap,cache_mode,avg_ms,p50_ms,p99_ms,throughput_rps,invalid_rate,shared_slots,unshared_slots,baseline_slots,block_copies";

fn agg_columns(r: &MetricsReport) -> String {
    format!(
        "{:.3},{:.3},{:.3},{:.3},{:.4},{},{},{},{}",
        r.latency_avg_ms,
        r.latency_p50_ms,
        r.latency_p99_ms,
        r.throughput_rps,
        r.invalid_rate,
        r.memory.shared_slots_peak,
        r.memory.unshared_slots_peak,
        r.memory.baseline_slots_peak,
        r.memory.block_copies_total
    )
}

fn mode_name(m: CacheMode) -> &'static str {
    match m {
        CacheMode::Separated => "separated",
        CacheMode::Paged => "paged",
    }
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.rps,
            r.bw,
            r.k,
            r.nd,
            r.lanes,
            r.masking,
            r.overlap,
            mode_name(r.cache_mode),
            agg_columns(&r.report)
        );
    }
    out
}

pub fn ablation_to_csv(rows: &[AblationRow], bw: usize, k: usize, nd: usize) -> String {
    let mut out = String::from(
        "masking,graph_dispatch,multi_lane,overlap,rps,bw,k,nd,avg_ms,p50_ms,p99_ms,throughput_rps,invalid_rate,shared_slots,unshared_slots,baseline_slots,block_copies",
    );
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.toggles.masking,
            r.toggles.graph_dispatch,
            r.toggles.multi_lane,
            r.toggles.overlap,
            r.rps,
            bw,
            k,
            nd,
            agg_columns(&r.report)
        );
    }
    out
}

pub fn memory_to_csv(rows: &[MemoryRow]) -> String {
    let mut out = String::from(
        "bw,prompt_len,nd,block_size,shared_slots,unshared_slots,separated_total,baseline_slots,block_copies,ratio",
    );
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.3}",
            r.bw,
            r.prompt_len,
            r.nd,
            r.block_size,
            r.shared_slots,
            r.unshared_slots,
            r.separated_total,
            r.baseline_slots,
            r.block_copies,
            r.ratio
        );
    }
    out
}

pub fn kernel_to_csv(rows: &[KernelRow]) -> String {
    let mut out = String::from(
        "bw,prompt_len,heads,head_dim,tile_size,steps,staged_us,naive_us,speedup,staged_tile_loads,naive_tile_loads,max_rel_err",
    );
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.1},{:.1},{:.3},{},{},{:.2e}",
            r.shape.bw,
            r.shape.prompt_len,
            r.shape.heads,
            r.shape.head_dim,
            r.shape.tile_size,
            r.shape.steps,
            r.staged_us,
            r.naive_us,
            r.speedup,
            r.staged_tile_loads,
            r.naive_tile_loads,
            r.max_rel_err
        );
    }
    out
}

/// Full nested report as pretty JSON (round-trips losslessly).
pub fn to_json<T: serde::Serialize>(rows: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sweep_is_header_only() {
        let csv = sweep_to_csv(&[]);
        assert_eq!(csv.trim_end(), REPORT_HEADER);
    }

    #[test]
    fn json_round_trips_reports() {
        let report = MetricsReport {
            completed: 3,
            latency_p99_ms: 12.5,
            ..Default::default()
        };
        let json = to_json(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.completed, 3);
        assert_eq!(back.latency_p99_ms, 12.5);
    }
}
