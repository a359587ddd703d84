//! Separated KV cache management.
//!
//! A request's KV state is split in two: the [`SharedKvCache`] holds the
//! prompt KV exactly once per request (every beam reads it), and the
//! [`UnsharedKvCache`] holds the per-beam generated-token KV in a fixed
//! buffer of exactly `bw * nd` token slots per layer. Beam selection
//! reorders the unshared cache in place through a canonicalized
//! [`ReorderPlan`]; no auxiliary full-size buffer is ever allocated.
//!
//! [`paged::PagedKvCache`] is the block-granular copy-on-write baseline the
//! benchmark harness compares against.

pub mod paged;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer's K and V panels, laid out row-major over token slots:
/// `[(slot * heads) + head] * head_dim + d`.
#[derive(Debug, Clone)]
struct LayerKv {
    k: Vec<f32>,
    v: Vec<f32>,
}

impl LayerKv {
    fn with_capacity(slots: usize, heads: usize, head_dim: usize) -> Self {
        let n = slots * heads * head_dim;
        LayerKv {
            k: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

fn checked_slots(parts: &[usize]) -> Result<usize> {
    let mut acc: usize = 1;
    for &p in parts {
        if p == 0 {
            return Err(Error::Config(format!(
                "cache dimension must be nonzero, got {parts:?}"
            )));
        }
        acc = acc
            .checked_mul(p)
            .ok_or_else(|| Error::Config(format!("cache dimensions overflow: {parts:?}")))?;
    }
    Ok(acc)
}

// ── Shared (prompt) cache ───────────────────────────────────────────

/// Prompt KV, stored once per request regardless of beam width.
///
/// Filled position-by-position during prefill and immutable afterwards.
#[derive(Debug, Clone)]
pub struct SharedKvCache {
    layers: Vec<LayerKv>,
    filled: Vec<usize>,
    prompt_len: usize,
    heads: usize,
    head_dim: usize,
}

impl SharedKvCache {
    pub fn new(layers: usize, heads: usize, head_dim: usize, prompt_len: usize) -> Result<Self> {
        checked_slots(&[layers, heads, head_dim, prompt_len.max(1)])?;
        Ok(SharedKvCache {
            layers: (0..layers)
                .map(|_| LayerKv::with_capacity(prompt_len, heads, head_dim))
                .collect(),
            filled: vec![0; layers],
            prompt_len,
            heads,
            head_dim,
        })
    }

    /// Append one position's K/V for `layer`. Positions must arrive in order.
    pub fn push_position(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<()> {
        let row = self.heads * self.head_dim;
        if k.len() != row || v.len() != row {
            return Err(Error::Shape(format!(
                "shared push expects {row} values per position, got k={}, v={}",
                k.len(),
                v.len()
            )));
        }
        let pos = self.filled[layer];
        if pos >= self.prompt_len {
            return Err(Error::State(format!(
                "shared cache layer {layer} already complete ({pos} positions)"
            )));
        }
        let off = pos * row;
        self.layers[layer].k[off..off + row].copy_from_slice(k);
        self.layers[layer].v[off..off + row].copy_from_slice(v);
        self.filled[layer] = pos + 1;
        Ok(())
    }

    /// True once every layer holds all prompt positions.
    pub fn is_complete(&self) -> bool {
        self.filled.iter().all(|&f| f == self.prompt_len)
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Positions currently filled for `layer` (equals `prompt_len` when
    /// prefill is done; smaller mid-prefill, where causal attention may only
    /// see the filled prefix).
    pub fn filled(&self, layer: usize) -> usize {
        self.filled[layer]
    }

    pub fn layer(&self, layer: usize) -> (&[f32], &[f32]) {
        (&self.layers[layer].k, &self.layers[layer].v)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Token slots owned by this cache: one per prompt position.
    pub fn token_slots(&self) -> usize {
        self.prompt_len
    }
}

// ── Unshared (generated) cache ──────────────────────────────────────

/// Per-beam generated-token KV with capacity exactly `bw * nd` token slots
/// per layer. The buffer never grows or reallocates after `init`; beam rows
/// are stored contiguously (`[beam][step]` panels) so one beam's generated
/// tokens read as a single strip.
#[derive(Debug, Clone)]
pub struct UnsharedKvCache {
    layers: Vec<LayerKv>,
    layer_filled: Vec<usize>,
    bw: usize,
    nd: usize,
    heads: usize,
    head_dim: usize,
    alloc_events: u64,
    reorder_row_writes: u64,
}

impl UnsharedKvCache {
    /// Allocate the fixed `bw * nd` slot buffer for every layer.
    pub fn init(bw: usize, nd: usize, layers: usize, heads: usize, head_dim: usize) -> Result<Self> {
        checked_slots(&[bw, nd, layers, heads, head_dim])?;
        let cache = UnsharedKvCache {
            layers: (0..layers)
                .map(|_| LayerKv::with_capacity(bw * nd, heads, head_dim))
                .collect(),
            layer_filled: vec![0; layers],
            bw,
            nd,
            heads,
            head_dim,
            alloc_events: 1,
            reorder_row_writes: 0,
        };
        Ok(cache)
    }

    pub fn beam_width(&self) -> usize {
        self.bw
    }

    pub fn decode_steps(&self) -> usize {
        self.nd
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Token capacity per layer: exactly `bw * nd`.
    pub fn token_capacity(&self) -> usize {
        self.bw * self.nd
    }

    /// Decode steps completed across all layers.
    pub fn filled_steps(&self) -> usize {
        self.layer_filled.iter().copied().min().unwrap_or(0)
    }

    pub fn layer_filled(&self, layer: usize) -> usize {
        self.layer_filled[layer]
    }

    /// Buffer allocations since creation. Stays at its post-init value for
    /// the whole request lifetime; appends and reorders never allocate.
    pub fn alloc_events(&self) -> u64 {
        self.alloc_events
    }

    /// Beam-row copies performed by in-place reorders (instrumentation).
    pub fn reorder_row_writes(&self) -> u64 {
        self.reorder_row_writes
    }

    /// Base pointer of layer 0's key panel; tests use this to prove the
    /// buffer is never reallocated.
    pub fn buffer_ptr(&self) -> *const f32 {
        self.layers[0].k.as_ptr()
    }

    fn row(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Append step `step` K/V for one layer, shaped `[n][heads][head_dim]`
    /// with `n` the live beam count (`n <= bw`; rows past `n` keep stale
    /// data and are never read).
    pub fn append_step(&mut self, layer: usize, step: usize, ks: &[f32], vs: &[f32]) -> Result<()> {
        if step != self.layer_filled[layer] {
            return Err(Error::Sequencing {
                expected: self.layer_filled[layer],
                got: step,
            });
        }
        if step >= self.nd {
            return Err(Error::Sequencing {
                expected: self.nd,
                got: step,
            });
        }
        let row = self.row();
        if ks.len() != vs.len() || ks.is_empty() || ks.len() % row != 0 || ks.len() > self.bw * row {
            return Err(Error::Shape(format!(
                "append_step expects 1..={} beam rows of {row} values, got k={}, v={}",
                self.bw,
                ks.len(),
                vs.len()
            )));
        }
        let n = ks.len() / row;
        let panel = &mut self.layers[layer];
        for b in 0..n {
            let dst = ((b * self.nd) + step) * row;
            let src = b * row;
            panel.k[dst..dst + row].copy_from_slice(&ks[src..src + row]);
            panel.v[dst..dst + row].copy_from_slice(&vs[src..src + row]);
        }
        self.layer_filled[layer] = step + 1;
        Ok(())
    }

    /// Write step K/V for a single beam (used by tests and the gather
    /// oracle to plant distinguishable rows).
    pub fn write_beam_step(&mut self, layer: usize, beam: usize, step: usize, k: &[f32], v: &[f32]) {
        let row = self.row();
        let dst = ((beam * self.nd) + step) * row;
        self.layers[layer].k[dst..dst + row].copy_from_slice(k);
        self.layers[layer].v[dst..dst + row].copy_from_slice(v);
    }

    /// Force the filled-step counters (test/oracle setup only).
    pub fn set_filled_steps(&mut self, steps: usize) {
        for f in self.layer_filled.iter_mut() {
            *f = steps;
        }
    }

    /// Key/value panels for one layer.
    pub fn layer(&self, layer: usize) -> (&[f32], &[f32]) {
        (&self.layers[layer].k, &self.layers[layer].v)
    }

    /// Offset of `(beam, step)`'s row within a layer panel.
    pub fn slot_offset(&self, beam: usize, step: usize) -> usize {
        ((beam * self.nd) + step) * self.row()
    }

    /// Apply a canonicalized reorder plan in place.
    ///
    /// Pass 1 executes all upward moves (`dst < src`) in ascending
    /// destination order; pass 2 executes all downward moves (`dst > src`)
    /// in descending destination order. With a non-decreasing `src` this is
    /// hazard-free: pass-1 reads always sit above every row already
    /// written, pass-2 reads always sit below.
    pub fn apply_reorder_in_place(&mut self, plan: &ReorderPlan) -> Result<()> {
        plan.check_monotone()?;
        if plan.len() > self.bw {
            return Err(Error::Plan(format!(
                "plan covers {} rows but cache has {} beams",
                plan.len(),
                self.bw
            )));
        }
        if let Some(&max_src) = plan.src.iter().max() {
            if max_src >= self.bw {
                return Err(Error::Plan(format!(
                    "source beam {max_src} out of range for width {}",
                    self.bw
                )));
            }
        }
        let strip = self.nd * self.row();
        let mut writes = 0u64;

        // Pass 1: upward moves, ascending destinations.
        let mut max_written: Option<usize> = None;
        for dst in 0..plan.len() {
            if plan.dir[dst] == 1 {
                let src = plan.src[dst];
                debug_assert!(
                    max_written.map_or(true, |w| src > w),
                    "pass-1 hazard: read row {src} after writing row {max_written:?}"
                );
                for layer in &mut self.layers {
                    layer.k.copy_within(src * strip..(src + 1) * strip, dst * strip);
                    layer.v.copy_within(src * strip..(src + 1) * strip, dst * strip);
                }
                max_written = Some(max_written.map_or(dst, |w| w.max(dst)));
                writes += 1;
            }
        }
        // Pass 2: downward moves, descending destinations.
        let mut min_written: Option<usize> = None;
        for dst in (0..plan.len()).rev() {
            if plan.dir[dst] == -1 {
                let src = plan.src[dst];
                debug_assert!(
                    min_written.map_or(true, |w| src < w),
                    "pass-2 hazard: read row {src} after writing row {min_written:?}"
                );
                for layer in &mut self.layers {
                    layer.k.copy_within(src * strip..(src + 1) * strip, dst * strip);
                    layer.v.copy_within(src * strip..(src + 1) * strip, dst * strip);
                }
                min_written = Some(min_written.map_or(dst, |w| w.min(dst)));
                writes += 1;
            }
        }
        self.reorder_row_writes += writes;
        Ok(())
    }
}

// ── Reorder planning ────────────────────────────────────────────────

/// Hazard-free in-place reorder plan: `src[b]` is the beam whose rows land
/// in slot `b`, `dir[b] = sign(src[b] - b)` marks the move direction
/// (+1 upward, -1 downward, 0 identity). `src` is always non-decreasing —
/// [`plan_reorder`] canonicalizes arbitrary selections by stable-sorting
/// them by source index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReorderPlan {
    src: Vec<usize>,
    dir: Vec<i8>,
}

impl ReorderPlan {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dir(&self) -> &[i8] {
        &self.dir
    }

    pub fn is_identity(&self) -> bool {
        self.dir.iter().all(|&d| d == 0)
    }

    fn check_monotone(&self) -> Result<()> {
        if self.src.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Plan(
                "source map is not non-decreasing; hazard freedom not provable".into(),
            ));
        }
        Ok(())
    }

    /// Build a plan directly from an already-monotone source map.
    pub fn from_monotone(src: Vec<usize>) -> Result<Self> {
        let dir = src
            .iter()
            .enumerate()
            .map(|(b, &s)| (s as i64 - b as i64).signum() as i8)
            .collect();
        let plan = ReorderPlan { src, dir };
        plan.check_monotone()?;
        Ok(plan)
    }
}

/// Canonicalize a beam selection into a hazard-free plan.
///
/// Returns the plan (sources stably sorted non-decreasing) and the
/// permutation mapping plan order back to caller order: slot `i` of the
/// plan corresponds to caller candidate `perm[i]`. Callers must apply the
/// same permutation to the selected scores/tokens so beam identities stay
/// aligned with cache rows.
pub fn plan_reorder(selected_src: &[usize], bw: usize) -> Result<(ReorderPlan, Vec<usize>)> {
    for &s in selected_src {
        if s >= bw {
            return Err(Error::Plan(format!(
                "source beam index {s} out of range for width {bw}"
            )));
        }
    }
    let mut perm: Vec<usize> = (0..selected_src.len()).collect();
    perm.sort_by_key(|&i| selected_src[i]); // stable: ties keep caller order
    let src: Vec<usize> = perm.iter().map(|&i| selected_src[i]).collect();
    let plan = ReorderPlan::from_monotone(src)?;
    Ok((plan, perm))
}

// ── Memory accounting ───────────────────────────────────────────────

/// Token-slot-denominated memory accounting for one request. One slot is
/// one token's K+V across all layers; byte conversion is a report-time
/// multiplier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub shared_token_slots: u64,
    pub unshared_token_slots: u64,
    pub baseline_token_slots: u64,
    pub block_copies: u64,
}

/// Snapshot the memory accounting of whichever caches the request holds.
pub fn memory_report(
    shared: Option<&SharedKvCache>,
    unshared: Option<&UnsharedKvCache>,
    baseline: Option<&paged::PagedKvCache>,
) -> MemoryStats {
    MemoryStats {
        shared_token_slots: shared.map_or(0, |s| s.token_slots() as u64),
        unshared_token_slots: unshared.map_or(0, |u| u.token_capacity() as u64),
        baseline_token_slots: baseline.map_or(0, |p| p.peak_token_slots() as u64),
        block_copies: baseline.map_or(0, |p| p.copy_count()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled_cache(bw: usize, nd: usize, steps: usize) -> UnsharedKvCache {
        // One layer, one head, head_dim 2; row values encode (beam, step).
        let mut c = UnsharedKvCache::init(bw, nd, 1, 1, 2).unwrap();
        for s in 0..steps {
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            for b in 0..bw {
                ks.extend_from_slice(&[b as f32, s as f32]);
                vs.extend_from_slice(&[b as f32 + 100.0, s as f32]);
            }
            c.append_step(0, s, &ks, &vs).unwrap();
        }
        c
    }

    fn rows(c: &UnsharedKvCache, steps: usize) -> Vec<Vec<f32>> {
        let (k, _) = c.layer(0);
        (0..c.beam_width())
            .map(|b| {
                (0..steps)
                    .flat_map(|s| {
                        let off = c.slot_offset(b, s);
                        k[off..off + 2].to_vec()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn init_capacity_is_bw_times_nd() {
        let c = UnsharedKvCache::init(128, 3, 2, 4, 16).unwrap();
        assert_eq!(c.token_capacity(), 384);
        let c = UnsharedKvCache::init(1, 1, 1, 1, 1).unwrap();
        assert_eq!(c.token_capacity(), 1);
        let c = UnsharedKvCache::init(512, 3, 2, 4, 16).unwrap();
        assert_eq!(c.token_capacity(), 1536);
        assert_eq!(c.filled_steps(), 0);
    }

    #[test]
    fn init_rejects_zero_and_overflow() {
        assert!(matches!(
            UnsharedKvCache::init(0, 3, 1, 1, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            UnsharedKvCache::init(usize::MAX, 3, 2, 4, 16),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn append_enforces_sequencing() {
        let mut c = UnsharedKvCache::init(2, 3, 1, 1, 1).unwrap();
        let kv = vec![0.0; 2];
        c.append_step(0, 0, &kv, &kv).unwrap();
        assert_eq!(c.filled_steps(), 1);
        let err = c.append_step(0, 2, &kv, &kv).unwrap_err();
        assert!(matches!(err, Error::Sequencing { expected: 1, got: 2 }));
    }

    #[test]
    fn appends_never_allocate() {
        let mut c = UnsharedKvCache::init(4, 3, 1, 2, 4).unwrap();
        let base_allocs = c.alloc_events();
        let ptr = c.buffer_ptr();
        let kv = vec![0.5; 4 * 2 * 4];
        for s in 0..3 {
            c.append_step(0, s, &kv, &kv).unwrap();
        }
        assert_eq!(c.filled_steps(), 3);
        assert_eq!(c.alloc_events(), base_allocs);
        assert_eq!(c.buffer_ptr(), ptr);
    }

    #[test]
    fn plan_identity() {
        let (plan, perm) = plan_reorder(&[0, 1, 2, 3], 4).unwrap();
        assert_eq!(plan.dir(), &[0, 0, 0, 0]);
        assert!(plan.is_identity());
        assert_eq!(perm, vec![0, 1, 2, 3]);
    }

    #[test]
    fn plan_directions_follow_sign() {
        let (plan, _) = plan_reorder(&[1, 2, 2, 3], 4).unwrap();
        assert_eq!(plan.dir(), &[1, 1, 0, 0]);
    }

    #[test]
    fn plan_canonicalizes_with_stable_permutation() {
        let (plan, perm) = plan_reorder(&[2, 0, 1, 0], 4).unwrap();
        assert_eq!(plan.src(), &[0, 0, 1, 2]);
        assert_eq!(perm, vec![1, 3, 2, 0]);
    }

    #[test]
    fn plan_rejects_out_of_range() {
        assert!(matches!(plan_reorder(&[4], 4), Err(Error::Plan(_))));
    }

    #[test]
    fn reorder_matches_hand_gather() {
        // src=[1,2,2,3] on rows [A,B,C,D] -> [B,C,C,D]
        let mut c = filled_cache(4, 3, 2);
        let before = rows(&c, 2);
        let plan = ReorderPlan::from_monotone(vec![1, 2, 2, 3]).unwrap();
        c.apply_reorder_in_place(&plan).unwrap();
        let after = rows(&c, 2);
        assert_eq!(after, vec![before[1].clone(), before[2].clone(), before[2].clone(), before[3].clone()]);

        // src=[0,0,1,2] on rows [A,B,C,D] -> [A,A,B,C] (all downward)
        let mut c = filled_cache(4, 3, 2);
        let before = rows(&c, 2);
        let plan = ReorderPlan::from_monotone(vec![0, 0, 1, 2]).unwrap();
        c.apply_reorder_in_place(&plan).unwrap();
        let after = rows(&c, 2);
        assert_eq!(after, vec![before[0].clone(), before[0].clone(), before[1].clone(), before[2].clone()]);
    }

    #[test]
    fn identity_reorder_writes_nothing() {
        let mut c = filled_cache(4, 3, 2);
        let before = rows(&c, 3);
        let plan = ReorderPlan::from_monotone(vec![0, 1, 2, 3]).unwrap();
        c.apply_reorder_in_place(&plan).unwrap();
        assert_eq!(c.reorder_row_writes(), 0);
        assert_eq!(rows(&c, 3), before);
    }

    #[test]
    fn reorder_rejects_non_monotone() {
        let mut c = filled_cache(4, 3, 1);
        let plan = ReorderPlan {
            src: vec![1, 0, 2, 3],
            dir: vec![1, -1, 0, 0],
        };
        assert!(matches!(
            c.apply_reorder_in_place(&plan),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn reorder_never_allocates() {
        let mut c = filled_cache(8, 3, 3);
        let allocs = c.alloc_events();
        let ptr = c.buffer_ptr();
        let plan = ReorderPlan::from_monotone(vec![0, 0, 1, 3, 3, 5, 7, 7]).unwrap();
        c.apply_reorder_in_place(&plan).unwrap();
        assert_eq!(c.alloc_events(), allocs);
        assert_eq!(c.buffer_ptr(), ptr);
    }

    #[test]
    fn memory_report_counts_slots() {
        let shared = SharedKvCache::new(2, 4, 16, 1000).unwrap();
        let unshared = UnsharedKvCache::init(512, 3, 2, 4, 16).unwrap();
        let stats = memory_report(Some(&shared), Some(&unshared), None);
        assert_eq!(stats.shared_token_slots, 1000);
        assert_eq!(stats.unshared_token_slots, 1536);

        // Shared accounting is a function of prompt length only.
        let unshared_256 = UnsharedKvCache::init(256, 3, 2, 4, 16).unwrap();
        let stats_256 = memory_report(Some(&shared), Some(&unshared_256), None);
        assert_eq!(stats_256.shared_token_slots, stats.shared_token_slots);
    }
}
