//! Three-tier scheduling: request admission, token-capacity dynamic
//! batching under an SLO wait quota, and multi-lane batch execution.
//!
//! The scheduler tier owns the admission queue and batch formation; the
//! engine tier runs one batch through prefill and the beam/decode steps
//! (see [`exec`]); lanes are the worker tier, each executing at most one
//! batch at a time. [`wall::WallEngine`] drives real threads on a
//! monotonic clock; [`sim::run_virtual`] is the deterministic virtual-time
//! twin used by the hermetic contract tests.

pub mod exec;
pub mod sim;
pub mod wall;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::beam::SelectionStats;
use crate::error::{Error, Result};
use crate::kvcache::MemoryStats;

/// Per-request beam-search parameters. Requests only batch together when
/// these match (batched phases run in lockstep).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamParams {
    pub bw: usize,
    pub k: usize,
    pub nd: usize,
    #[serde(default = "default_masking")]
    pub masking: bool,
}

fn default_masking() -> bool {
    true
}

impl Default for BeamParams {
    fn default() -> Self {
        BeamParams {
            bw: 8,
            k: 8,
            nd: 3,
            masking: true,
        }
    }
}

impl BeamParams {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.bw == 0 || self.k == 0 || self.nd == 0 {
            return Err(Error::Config(format!("beam params must be nonzero: {self:?}")));
        }
        if self.k > vocab_size {
            return Err(Error::Config(format!(
                "top-K {} exceeds vocab size {vocab_size}",
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Request {
    pub id: u64,
    pub prompt: Vec<u32>,
    pub arrival_us: u64,
    pub params: BeamParams,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub requests: Vec<Request>,
    pub total_tokens: usize,
    pub formed_us: u64,
    /// A single request larger than the batch capacity runs solo, flagged.
    pub oversized: bool,
}

/// Which KV management strategy the engine runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Shared prompt cache + fixed unshared per-beam cache (this engine).
    Separated,
    /// Block-granular copy-on-write baseline.
    Paged,
}

fn default_max_tokens() -> usize {
    4096
}
fn default_wait_quota() -> u64 {
    2_000
}
fn default_lanes() -> usize {
    1
}
fn default_slo() -> u64 {
    200_000
}
fn default_tick() -> u64 {
    1_000
}
fn default_queue_bound() -> usize {
    4096
}
fn default_true() -> bool {
    true
}
fn default_block_size() -> usize {
    16
}
fn default_cache_mode() -> CacheMode {
    CacheMode::Separated
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_max_tokens")]
    pub max_tokens_per_batch: usize,
    #[serde(default = "default_wait_quota")]
    pub wait_quota_us: u64,
    #[serde(default = "default_lanes")]
    pub num_lanes: usize,
    #[serde(default = "default_slo")]
    pub slo_p99_target_us: u64,
    /// Scheduling tick: the polling granularity that bounds quota slack.
    #[serde(default = "default_tick")]
    pub tick_us: u64,
    #[serde(default = "default_queue_bound")]
    pub queue_bound: usize,
    /// Host-side mask preparation overlaps the forward pass that produces
    /// the logits it will filter.
    #[serde(default = "default_true")]
    pub overlap: bool,
    /// Coalesce per-phase operation submissions into one handoff.
    #[serde(default = "default_true")]
    pub graph_dispatch: bool,
    #[serde(default = "default_cache_mode")]
    pub cache_mode: CacheMode,
    #[serde(default = "default_block_size")]
    pub paged_block_size: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens_per_batch == 0
            || self.num_lanes == 0
            || self.tick_us == 0
            || self.queue_bound == 0
            || self.paged_block_size == 0
        {
            return Err(Error::Config(format!("engine config must be positive: {self:?}")));
        }
        Ok(())
    }
}

// ── Traces ──────────────────────────────────────────────────────────

/// One phase span of one request: JSON-lines records, one per span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub request_id: u64,
    pub phase: String,
    pub start_us: u64,
    pub end_us: u64,
    pub lane: u32,
    /// Device-handoff count for the phase (1 under graph dispatch).
    pub submissions: u32,
}

impl PhaseSpan {
    pub fn point(request_id: u64, phase: &str, at_us: u64, lane: u32) -> Self {
        PhaseSpan {
            request_id,
            phase: phase.to_string(),
            start_us: at_us,
            end_us: at_us,
            lane,
            submissions: 0,
        }
    }
}

/// Serialize spans as JSON-lines.
pub fn spans_to_jsonl(spans: &[PhaseSpan]) -> Result<String> {
    let mut out = String::new();
    for s in spans {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Result of one request: emitted items plus instrumentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestOutput {
    pub id: u64,
    pub items: Vec<(Vec<u32>, f32)>,
    pub live_beams: usize,
    pub invalid_items: u64,
    pub selection: SelectionStats,
    pub memory: MemoryStats,
    pub arrival_us: u64,
    pub completion_us: u64,
    pub error: Option<String>,
}

// ── Batch formation ─────────────────────────────────────────────────

/// Greedily pack FIFO-ordered, parameter-compatible requests up to the
/// token capacity. A batch dispatches when its head has waited out the
/// quota, or when it can no longer grow (the next request does not fit or
/// carries different parameters); otherwise it keeps waiting for work.
/// An oversized head dispatches alone immediately, flagged.
pub fn form_batch(queue: &mut VecDeque<Request>, now_us: u64, cfg: &EngineConfig) -> Option<Batch> {
    let head = queue.front()?;
    let head_age = now_us.saturating_sub(head.arrival_us);
    let aged_out = head_age >= cfg.wait_quota_us;

    if head.prompt.len() > cfg.max_tokens_per_batch {
        let req = queue.pop_front().expect("head exists");
        let total_tokens = req.prompt.len();
        return Some(Batch {
            requests: vec![req],
            total_tokens,
            formed_us: now_us,
            oversized: true,
        });
    }

    let params = head.params;
    let mut take = 0usize;
    let mut total = 0usize;
    for req in queue.iter() {
        if req.params != params || total + req.prompt.len() > cfg.max_tokens_per_batch {
            break;
        }
        total += req.prompt.len();
        take += 1;
    }
    debug_assert!(take >= 1);
    let blocked = take < queue.len(); // next request exists but cannot join
    if !aged_out && !blocked {
        return None; // wait for more work, up to the quota
    }
    let requests: Vec<Request> = queue.drain(..take).collect();
    Some(Batch {
        requests,
        total_tokens: total,
        formed_us: now_us,
        oversized: false,
    })
}

/// Least-loaded lane by outstanding token count, lowest index on ties.
pub fn pick_lane(loads: &[u64]) -> usize {
    loads
        .iter()
        .enumerate()
        .min_by_key(|&(i, &l)| (l, i))
        .map(|(i, _)| i)
        .expect("at least one lane")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64, tokens: usize, arrival: u64) -> Request {
        Request {
            id,
            prompt: vec![0; tokens],
            arrival_us: arrival,
            params: BeamParams::default(),
        }
    }

    fn cfg() -> EngineConfig {
        EngineConfig {
            max_tokens_per_batch: 1000,
            wait_quota_us: 2_000,
            ..Default::default()
        }
    }

    #[test]
    fn packs_while_capacity_allows() {
        let mut q: VecDeque<Request> =
            vec![req(0, 400, 0), req(1, 400, 0), req(2, 400, 0)].into();
        // Head is aged out; the first two fit (800), the third is deferred.
        let b = form_batch(&mut q, 5_000, &cfg()).unwrap();
        assert_eq!(b.requests.len(), 2);
        assert_eq!(b.total_tokens, 800);
        assert_eq!(q.len(), 1);
        assert_eq!(q.front().unwrap().id, 2);
    }

    #[test]
    fn waits_for_quota_when_batch_can_still_grow() {
        let mut q: VecDeque<Request> = vec![req(0, 100, 0)].into();
        assert!(form_batch(&mut q, 500, &cfg()).is_none());
        // Head aged past the quota, queue otherwise empty: singleton batch.
        let b = form_batch(&mut q, 2_500, &cfg()).unwrap();
        assert_eq!(b.requests.len(), 1);
        assert!(!b.oversized);
    }

    #[test]
    fn dispatches_early_when_blocked_by_capacity() {
        let mut q: VecDeque<Request> = vec![req(0, 900, 0), req(1, 900, 10)].into();
        // Not aged out, but request 1 cannot join: dispatch the head now.
        let b = form_batch(&mut q, 100, &cfg()).unwrap();
        assert_eq!(b.requests.len(), 1);
        assert_eq!(b.requests[0].id, 0);
    }

    #[test]
    fn incompatible_params_split_batches() {
        let mut a = req(0, 100, 0);
        a.params.bw = 4;
        let mut b = req(1, 100, 0);
        b.params.bw = 8;
        let mut q: VecDeque<Request> = vec![a, b].into();
        let batch = form_batch(&mut q, 100, &cfg()).unwrap();
        assert_eq!(batch.requests.len(), 1);
    }

    #[test]
    fn oversized_head_runs_solo_and_flagged() {
        let mut q: VecDeque<Request> = vec![req(0, 5000, 0), req(1, 10, 0)].into();
        let b = form_batch(&mut q, 0, &cfg()).unwrap();
        assert!(b.oversized);
        assert_eq!(b.requests.len(), 1);
        assert_eq!(b.total_tokens, 5000);
    }

    #[test]
    fn lane_pick_prefers_least_loaded_then_lowest_index() {
        assert_eq!(pick_lane(&[0, 0, 0]), 0);
        assert_eq!(pick_lane(&[500, 100]), 1);
        assert_eq!(pick_lane(&[100, 100, 50]), 2);
    }

    #[test]
    fn random_arrival_audit_respects_capacity_and_quota() {
        let cfg = cfg();
        let mut state = 7u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let mut q: VecDeque<Request> = VecDeque::new();
        let mut now = 0u64;
        let mut id = 0u64;
        let mut formed: Vec<(Batch, u64)> = Vec::new();
        for _ in 0..20_000 {
            now += cfg.tick_us;
            if next() % 3 == 0 {
                q.push_back(req(id, 1 + (next() % 600) as usize, now));
                id += 1;
            }
            while let Some(b) = form_batch(&mut q, now, &cfg) {
                formed.push((b, now));
            }
        }
        // Drain the tail, still tick by tick.
        while !q.is_empty() {
            now += cfg.tick_us;
            while let Some(b) = form_batch(&mut q, now, &cfg) {
                formed.push((b, now));
            }
        }
        assert!(!formed.is_empty());
        for (b, t) in &formed {
            assert!(b.oversized || b.total_tokens <= cfg.max_tokens_per_batch);
            let head_wait = t - b.requests[0].arrival_us;
            // Quota plus one scheduling tick of slack.
            assert!(head_wait <= cfg.wait_quota_us + cfg.tick_us, "head waited {head_wait}");
        }
    }
}
