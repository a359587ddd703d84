//! Candidate selection: per-beam top-K and early-terminated global top-BW.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::beam::mask::MASK_EXCLUDE_THRESHOLD;
use crate::error::{Error, Result};

/// One expansion candidate: `(beam, token)` with the would-be cumulative
/// log-probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub beam: u32,
    pub token: u32,
    pub score: f32,
}

/// The fixed total order: score descending, then beam ascending, then
/// token ascending. `Ordering::Greater` means `a` ranks above `b`. The
/// order is total over finite scores, which makes oracle comparisons
/// bit-exact.
#[inline]
pub fn ranks_above(a: &Candidate, b: &Candidate) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| b.beam.cmp(&a.beam))
        .then_with(|| b.token.cmp(&a.token))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked(Candidate);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        ranks_above(&self.0, &other.0)
    }
}

/// Instrumentation for the early-termination selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// Candidates in the flattened pool.
    pub pool_size: u64,
    /// Candidates actually visited.
    pub visited: u64,
    /// Heap insertions.
    pub inserted: u64,
    /// Heap-minimum comparisons once the heap was full.
    pub compared: u64,
    /// Beams whose traversal terminated early.
    pub early_terminated_beams: u64,
    /// Candidates skipped by early termination.
    pub skipped: u64,
}

impl SelectionStats {
    pub fn accumulate(&mut self, other: &SelectionStats) {
        self.pool_size += other.pool_size;
        self.visited += other.visited;
        self.inserted += other.inserted;
        self.compared += other.compared;
        self.early_terminated_beams += other.early_terminated_beams;
        self.skipped += other.skipped;
    }
}

/// Per-beam top-K over a scored row (`scores[t]` is the candidate's full
/// cumulative score for token `t`).
///
/// Masked entries sit at or below [`MASK_EXCLUDE_THRESHOLD`] and are
/// excluded, so the result may hold fewer than `k` candidates; an entirely
/// masked row is a dead-beam error. Output is descending under the total
/// order (ties broken by ascending token id).
pub fn per_beam_topk(scores: &[f32], beam: u32, k: usize) -> Result<Vec<Candidate>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "top-K {k} exceeds vocabulary size {}",
            scores.len()
        )));
    }
    let mut cands: Vec<Candidate> = scores
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s > MASK_EXCLUDE_THRESHOLD)
        .map(|(t, &s)| Candidate {
            beam,
            token: t as u32,
            score: s,
        })
        .collect();
    if cands.is_empty() {
        return Err(Error::DeadBeam(beam));
    }
    cands.sort_unstable_by(|a, b| ranks_above(b, a));
    cands.truncate(k);
    Ok(cands)
}

/// Early-terminated global top-`bw` over per-beam candidate lists.
///
/// A bounded min-heap of size `bw` holds the best candidates seen; because
/// each input list is descending, a beam's traversal stops at the first
/// candidate that does not outrank the heap minimum once the heap is full —
/// no later candidate of that beam could either. The result is identical
/// to fully sorting the flattened pool under the total order.
pub fn select_top_bw(lists: &[Vec<Candidate>], bw: usize) -> (Vec<Candidate>, SelectionStats) {
    let mut stats = SelectionStats {
        pool_size: lists.iter().map(|l| l.len() as u64).sum(),
        ..Default::default()
    };
    let mut heap: BinaryHeap<std::cmp::Reverse<Ranked>> = BinaryHeap::with_capacity(bw + 1);

    for list in lists {
        debug_assert!(
            list.windows(2).all(|w| ranks_above(&w[0], &w[1]) == Ordering::Greater),
            "per-beam candidate lists must be strictly descending"
        );
        for (i, &cand) in list.iter().enumerate() {
            stats.visited += 1;
            if heap.len() < bw {
                heap.push(std::cmp::Reverse(Ranked(cand)));
                stats.inserted += 1;
                continue;
            }
            let worst = heap.peek().expect("heap is full").0 .0;
            stats.compared += 1;
            if ranks_above(&cand, &worst) == Ordering::Greater {
                heap.pop();
                heap.push(std::cmp::Reverse(Ranked(cand)));
                stats.inserted += 1;
            } else {
                stats.early_terminated_beams += 1;
                stats.skipped += (list.len() - i - 1) as u64;
                break;
            }
        }
    }

    let mut out: Vec<Candidate> = heap.into_iter().map(|r| r.0 .0).collect();
    out.sort_unstable_by(|a, b| ranks_above(b, a));
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beam::mask::NEG_MASK;

    #[test]
    fn topk_unique_max() {
        let got = per_beam_topk(&[0.1, 0.9, 0.3], 0, 1).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].token, 1);
    }

    #[test]
    fn topk_breaks_ties_by_token_id() {
        let got = per_beam_topk(&[5.0, 5.0, 1.0], 0, 2).unwrap();
        assert_eq!(got[0].token, 0);
        assert_eq!(got[1].token, 1);
    }

    #[test]
    fn topk_excludes_masked_scores() {
        let got = per_beam_topk(&[0.5, NEG_MASK, NEG_MASK + 1.0], 2, 3).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].token, 0);
    }

    #[test]
    fn fully_masked_row_is_dead_beam() {
        let err = per_beam_topk(&[NEG_MASK, NEG_MASK - 3.0], 7, 1).unwrap_err();
        assert!(matches!(err, Error::DeadBeam(7)));
    }

    #[test]
    fn topk_larger_than_vocab_is_rejected() {
        assert!(matches!(
            per_beam_topk(&[0.0, 1.0], 0, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn select_single_beam_is_argmax() {
        let lists = vec![vec![
            Candidate { beam: 0, token: 3, score: 2.0 },
            Candidate { beam: 0, token: 1, score: 1.0 },
        ]];
        let (got, _) = select_top_bw(&lists, 1);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].token, 3);
    }

    #[test]
    fn select_two_beams_hand_case() {
        let lists = vec![
            vec![
                Candidate { beam: 0, token: 0, score: 9.0 },
                Candidate { beam: 0, token: 1, score: 7.0 },
            ],
            vec![
                Candidate { beam: 1, token: 0, score: 8.0 },
                Candidate { beam: 1, token: 1, score: 1.0 },
            ],
        ];
        let (got, stats) = select_top_bw(&lists, 2);
        let scores: Vec<f32> = got.iter().map(|c| c.score).collect();
        assert_eq!(scores, vec![9.0, 8.0]);
        // Beam 1 terminates at its second candidate: 1.0 cannot outrank
        // the heap minimum 8.0.
        assert_eq!(stats.early_terminated_beams, 1);
    }

    #[test]
    fn early_termination_skips_tail() {
        let lists = vec![
            vec![
                Candidate { beam: 0, token: 0, score: 10.0 },
                Candidate { beam: 0, token: 1, score: 9.0 },
            ],
            (0..100)
                .map(|t| Candidate { beam: 1, token: t, score: -1.0 - t as f32 })
                .collect::<Vec<_>>(),
        ];
        let (got, stats) = select_top_bw(&lists, 2);
        assert_eq!(got[0].score, 10.0);
        assert_eq!(got[1].score, 9.0);
        assert_eq!(stats.skipped, 99);
        assert_eq!(stats.visited, 3);
    }
}
