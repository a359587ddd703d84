//! Constrained beam search: valid-item masking, per-beam top-K,
//! early-terminated global selection, and reusable beam-state pooling.

pub mod mask;
pub mod select;
pub mod vocab;

pub use mask::{mask_for_prefix, MaskBuffer, MaskMode, MASK_EXCLUDE_THRESHOLD, NEG_MASK};
pub use select::{per_beam_topk, ranks_above, select_top_bw, Candidate, SelectionStats};
pub use vocab::ItemVocabulary;

use crate::error::{Error, Result};
use crate::kvcache::{plan_reorder, ReorderPlan};

/// One beam's state: its token prefix and cumulative log-probability.
#[derive(Debug, Clone)]
pub struct BeamSlot {
    tokens: Vec<u32>,
    cum_log_prob: f32,
    live: bool,
}

impl BeamSlot {
    fn fresh(nd: usize) -> Self {
        BeamSlot {
            tokens: Vec::with_capacity(nd),
            cum_log_prob: 0.0,
            live: false,
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn cum_log_prob(&self) -> f32 {
        self.cum_log_prob
    }
}

/// Fixed-size pool of beam slots plus an equal-size scratch set.
///
/// Selection commits overwrite slots in place through the scratch set and
/// a buffer swap: after warmup (init) the pool never allocates, whatever
/// the fork pattern.
#[derive(Debug)]
pub struct BeamPool {
    slots: Vec<BeamSlot>,
    scratch: Vec<BeamSlot>,
    bw: usize,
    nd: usize,
    live: usize,
    steps_committed: usize,
    alloc_events: u64,
}

impl BeamPool {
    pub fn init(bw: usize, nd: usize) -> Result<Self> {
        if bw == 0 || nd == 0 {
            return Err(Error::Config(format!(
                "beam pool needs bw >= 1 and nd >= 1, got bw={bw}, nd={nd}"
            )));
        }
        Ok(BeamPool {
            slots: (0..bw).map(|_| BeamSlot::fresh(nd)).collect(),
            scratch: (0..bw).map(|_| BeamSlot::fresh(nd)).collect(),
            bw,
            nd,
            live: 0,
            steps_committed: 0,
            alloc_events: 1,
        })
    }

    pub fn beam_width(&self) -> usize {
        self.bw
    }

    pub fn decode_steps(&self) -> usize {
        self.nd
    }

    pub fn live(&self) -> usize {
        self.live
    }

    pub fn steps_committed(&self) -> usize {
        self.steps_committed
    }

    pub fn alloc_events(&self) -> u64 {
        self.alloc_events
    }

    pub fn slot(&self, b: usize) -> &BeamSlot {
        &self.slots[b]
    }

    /// Live slots in pool order.
    pub fn live_slots(&self) -> impl Iterator<Item = &BeamSlot> {
        self.slots.iter().take(self.live).filter(|s| s.live)
    }

    /// Current tip token of each live beam.
    pub fn tips(&self) -> Vec<u32> {
        self.slots[..self.live]
            .iter()
            .map(|s| *s.tokens.last().expect("live slot has tokens"))
            .collect()
    }

    /// First selection: top-BW distinct tokens from the single prefill
    /// logits row. All hypothetical beams are identical before the fork, so
    /// candidates carry no meaningful source index.
    pub fn bootstrap(&mut self, selected: &[Candidate]) -> Result<()> {
        if self.steps_committed != 0 {
            return Err(Error::State("bootstrap on a non-empty pool".into()));
        }
        if selected.is_empty() || selected.len() > self.bw {
            return Err(Error::State(format!(
                "bootstrap with {} candidates for width {}",
                selected.len(),
                self.bw
            )));
        }
        for (i, c) in selected.iter().enumerate() {
            let slot = &mut self.slots[i];
            slot.tokens.clear();
            slot.tokens.push(c.token);
            slot.cum_log_prob = c.score;
            slot.live = true;
        }
        for slot in self.slots.iter_mut().skip(selected.len()) {
            slot.live = false;
        }
        self.live = selected.len();
        self.steps_committed = 1;
        Ok(())
    }

    /// Commit one selection: overwrite the pool in place (scratch set plus
    /// swap) and return the canonicalized reorder plan for the KV cache.
    /// The selected candidates are permuted exactly like the cache rows, so
    /// beam identities stay aligned.
    pub fn commit_step(&mut self, selected: &[Candidate], step: usize) -> Result<ReorderPlan> {
        if step != self.steps_committed {
            return Err(Error::Sequencing {
                expected: self.steps_committed,
                got: step,
            });
        }
        if selected.is_empty() || selected.len() > self.bw {
            return Err(Error::State(format!(
                "{} candidates for width {}",
                selected.len(),
                self.bw
            )));
        }
        for c in selected {
            if c.beam as usize >= self.live || !self.slots[c.beam as usize].live {
                return Err(Error::State(format!(
                    "candidate references dead beam {}",
                    c.beam
                )));
            }
            if self.slots[c.beam as usize].tokens.len() != step {
                return Err(Error::State(format!(
                    "beam {} has {} tokens at step {step}",
                    c.beam,
                    self.slots[c.beam as usize].tokens.len()
                )));
            }
        }

        let srcs: Vec<usize> = selected.iter().map(|c| c.beam as usize).collect();
        let (plan, perm) = plan_reorder(&srcs, self.live)?;

        for (dst, &caller_idx) in perm.iter().enumerate() {
            let c = &selected[caller_idx];
            let src = c.beam as usize;
            debug_assert_eq!(src, plan.src()[dst]);
            // Split borrow: scratch and slots are distinct buffers.
            let slot = &mut self.scratch[dst];
            slot.tokens.clear();
            slot.tokens.extend_from_slice(&self.slots[src].tokens);
            slot.tokens.push(c.token);
            slot.cum_log_prob = c.score;
            slot.live = true;
        }
        for slot in self.scratch.iter_mut().skip(selected.len()) {
            slot.live = false;
        }
        std::mem::swap(&mut self.slots, &mut self.scratch);
        self.live = selected.len();
        self.steps_committed += 1;
        Ok(plan)
    }

    /// Completed items, best first (score descending, token tuple
    /// ascending on ties).
    pub fn final_items(&self) -> Vec<(Vec<u32>, f32)> {
        let mut items: Vec<(Vec<u32>, f32)> = self
            .slots
            .iter()
            .filter(|s| s.live)
            .map(|s| (s.tokens.clone(), s.cum_log_prob))
            .collect();
        items.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
        });
        items
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(beam: u32, token: u32, score: f32) -> Candidate {
        Candidate { beam, token, score }
    }

    #[test]
    fn bootstrap_then_self_continue_appends() {
        let mut pool = BeamPool::init(3, 3).unwrap();
        pool.bootstrap(&[cand(0, 5, -0.1), cand(0, 7, -0.2), cand(0, 9, -0.3)])
            .unwrap();
        assert_eq!(pool.tips(), vec![5, 7, 9]);

        let plan = pool
            .commit_step(&[cand(0, 1, -0.4), cand(1, 2, -0.5), cand(2, 3, -0.6)], 1)
            .unwrap();
        assert!(plan.is_identity());
        assert_eq!(pool.slot(0).tokens(), &[5, 1]);
        assert_eq!(pool.slot(1).tokens(), &[7, 2]);
        assert_eq!(pool.slot(2).tokens(), &[9, 3]);
    }

    #[test]
    fn all_beams_fork_from_beam_zero() {
        let mut pool = BeamPool::init(3, 3).unwrap();
        pool.bootstrap(&[cand(0, 5, -0.1), cand(0, 7, -0.2), cand(0, 9, -0.3)])
            .unwrap();
        pool.commit_step(&[cand(0, 1, -0.4), cand(0, 2, -0.5), cand(0, 3, -0.6)], 1)
            .unwrap();
        for (i, expect) in [(0usize, 1u32), (1, 2), (2, 3)] {
            assert_eq!(pool.slot(i).tokens(), &[5, expect]);
        }
    }

    #[test]
    fn commit_permutes_candidates_like_the_plan() {
        let mut pool = BeamPool::init(4, 3).unwrap();
        pool.bootstrap(&[
            cand(0, 10, -0.1),
            cand(0, 11, -0.2),
            cand(0, 12, -0.3),
            cand(0, 13, -0.4),
        ])
        .unwrap();
        // Caller order references beams [2, 0, 1, 0].
        let plan = pool
            .commit_step(
                &[cand(2, 1, -1.0), cand(0, 2, -1.1), cand(1, 3, -1.2), cand(0, 4, -1.3)],
                1,
            )
            .unwrap();
        assert_eq!(plan.src(), &[0, 0, 1, 2]);
        assert_eq!(pool.slot(0).tokens(), &[10, 2]);
        assert_eq!(pool.slot(1).tokens(), &[10, 4]);
        assert_eq!(pool.slot(2).tokens(), &[11, 3]);
        assert_eq!(pool.slot(3).tokens(), &[12, 1]);
    }

    #[test]
    fn commits_never_allocate() {
        let bw = 512;
        let mut pool = BeamPool::init(bw, 3).unwrap();
        let allocs = pool.alloc_events();
        let boot: Vec<Candidate> = (0..bw).map(|i| cand(0, i as u32, -0.001 * i as f32)).collect();
        pool.bootstrap(&boot).unwrap();
        let caps: Vec<usize> = pool.slots.iter().map(|s| s.tokens.capacity()).collect();
        for step in 1..3 {
            let sel: Vec<Candidate> = (0..bw)
                .map(|i| cand((i as u32 * 7) % bw as u32, i as u32, -0.01 * i as f32))
                .collect();
            pool.commit_step(&sel, step).unwrap();
        }
        assert_eq!(pool.alloc_events(), allocs);
        let caps_after: Vec<usize> = pool.slots.iter().map(|s| s.tokens.capacity()).collect();
        assert_eq!(caps, caps_after);
    }

    #[test]
    fn commit_rejects_dead_beam_references() {
        let mut pool = BeamPool::init(2, 2).unwrap();
        pool.bootstrap(&[cand(0, 1, -0.5)]).unwrap(); // only 1 live beam
        assert!(matches!(
            pool.commit_step(&[cand(1, 0, -1.0)], 1),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn final_items_sorted_by_score() {
        let mut pool = BeamPool::init(2, 2).unwrap();
        pool.bootstrap(&[cand(0, 1, -0.5), cand(0, 2, -0.1)]).unwrap();
        pool.commit_step(&[cand(1, 3, -0.9), cand(0, 4, -0.3)], 1).unwrap();
        let items = pool.final_items();
        assert_eq!(items[0].0, vec![1, 4]);
        assert!((items[0].1 - -0.3).abs() < 1e-6);
        assert_eq!(items[1].0, vec![2, 3]);
    }
}
