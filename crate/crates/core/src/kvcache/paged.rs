//! Block-granular paged KV cache with copy-on-write refcounting.
//!
//! This is the comparison baseline: prompt blocks are shared across beams
//! at `refcount = bw`, and every beam fork that lands on a partially filled
//! shared tip block pays a physical block copy. Attention reads go through
//! a per-beam gather into a contiguous scratch buffer, which is the
//! redundant-load behaviour the separated design removes.

use crate::error::{Error, Result};

/// Per-beam chain of block ids plus the logical token length it covers.
#[derive(Debug, Clone, Default)]
pub struct BlockTable {
    pub blocks: Vec<usize>,
    pub tokens: usize,
}

/// Pool of fixed-size KV blocks shared by all beams of one request.
///
/// A block id addresses the same slot range in every layer's panel. Blocks
/// are freed exactly when their refcount reaches zero.
#[derive(Debug)]
pub struct PagedKvCache {
    block_size: usize,
    layers: usize,
    heads: usize,
    head_dim: usize,
    k_pool: Vec<Vec<f32>>,
    v_pool: Vec<Vec<f32>>,
    refcount: Vec<u32>,
    free_list: Vec<usize>,
    tables: Vec<BlockTable>,
    prompt_blocks: Vec<usize>,
    prompt_len: usize,
    copy_count: u64,
    blocks_in_use: usize,
    peak_blocks: usize,
    gathered_blocks: u64,
}

impl PagedKvCache {
    pub fn new(
        layers: usize,
        heads: usize,
        head_dim: usize,
        block_size: usize,
        num_blocks: usize,
    ) -> Result<Self> {
        if block_size == 0 || num_blocks == 0 {
            return Err(Error::Config("paged cache needs nonzero block geometry".into()));
        }
        let per_block = block_size
            .checked_mul(heads)
            .and_then(|x| x.checked_mul(head_dim))
            .ok_or_else(|| Error::Config("paged block dimensions overflow".into()))?;
        let pool_len = per_block
            .checked_mul(num_blocks)
            .ok_or_else(|| Error::Config("paged pool dimensions overflow".into()))?;
        Ok(PagedKvCache {
            block_size,
            layers,
            heads,
            head_dim,
            k_pool: (0..layers).map(|_| vec![0.0; pool_len]).collect(),
            v_pool: (0..layers).map(|_| vec![0.0; pool_len]).collect(),
            refcount: vec![0; num_blocks],
            free_list: (0..num_blocks).rev().collect(),
            tables: Vec::new(),
            prompt_blocks: Vec::new(),
            prompt_len: 0,
            copy_count: 0,
            blocks_in_use: 0,
            peak_blocks: 0,
            gathered_blocks: 0,
        })
    }

    /// Pool size that comfortably fits one request: the prompt chain plus a
    /// private tail and generated blocks per beam.
    pub fn blocks_for_request(prompt_len: usize, bw: usize, nd: usize, block_size: usize) -> usize {
        let prompt = prompt_len.div_ceil(block_size);
        prompt + bw * (1 + nd.div_ceil(block_size)) + 4
    }

    fn row(&self) -> usize {
        self.heads * self.head_dim
    }

    fn alloc_block(&mut self) -> Result<usize> {
        let id = self.free_list.pop().ok_or(Error::PoolExhausted {
            requested: 1,
            available: 0,
        })?;
        self.refcount[id] = 1;
        self.blocks_in_use += 1;
        self.peak_blocks = self.peak_blocks.max(self.blocks_in_use);
        Ok(id)
    }

    fn retain(&mut self, id: usize) {
        self.refcount[id] += 1;
    }

    fn release(&mut self, id: usize) {
        debug_assert!(self.refcount[id] > 0, "release of free block {id}");
        self.refcount[id] -= 1;
        if self.refcount[id] == 0 {
            self.free_list.push(id);
            self.blocks_in_use -= 1;
        }
    }

    /// Append one prompt position's K/V for `layer`. Prompt blocks are
    /// owned by the root chain until [`Self::init_beams`] shares them.
    pub fn prefill_push(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<()> {
        let row = self.row();
        debug_assert_eq!(k.len(), row);
        if layer == 0 {
            if self.prompt_len % self.block_size == 0 {
                let id = self.alloc_block()?;
                self.prompt_blocks.push(id);
            }
            self.prompt_len += 1;
        }
        // Layer 0 leads: it advances the position, later layers write into it.
        let pos = self.prompt_len - 1;
        let block = self.prompt_blocks[pos / self.block_size];
        let off = (block * self.block_size + pos % self.block_size) * row;
        self.k_pool[layer][off..off + row].copy_from_slice(k);
        self.v_pool[layer][off..off + row].copy_from_slice(v);
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Create `bw` beam tables that all share the prompt blocks
    /// (copy-on-write, refcount = bw each).
    pub fn init_beams(&mut self, bw: usize) -> Result<()> {
        if !self.tables.is_empty() {
            return Err(Error::State("beam tables already initialized".into()));
        }
        let chain = self.prompt_blocks.clone();
        for _ in 0..bw {
            for &b in &chain {
                self.retain(b);
            }
            self.tables.push(BlockTable {
                blocks: chain.clone(),
                tokens: self.prompt_len,
            });
        }
        // Drop the root chain's ownership; beams now carry the references.
        for &b in &chain {
            self.release(b);
        }
        Ok(())
    }

    /// Fork beam tables according to the selected source indices and give
    /// every beam whose tip block is partially filled and shared its own
    /// physical copy. The sharing decision is taken against the table state
    /// before any copy, so all forks of one step are charged alike.
    pub fn fork_tables(&mut self, selected_src: &[usize]) -> Result<()> {
        for &s in selected_src {
            if s >= self.tables.len() {
                return Err(Error::Plan(format!(
                    "fork source {s} out of range ({} beams)",
                    self.tables.len()
                )));
            }
        }
        let mut new_tables: Vec<BlockTable> = Vec::with_capacity(selected_src.len());
        for &s in selected_src {
            let t = self.tables[s].clone();
            for &b in &t.blocks {
                self.retain(b);
            }
            new_tables.push(t);
        }
        // Retired beams release their references at step commit.
        let old = std::mem::take(&mut self.tables);
        for t in old {
            for b in t.blocks {
                self.release(b);
            }
        }

        // Sharing snapshot before any copy is performed.
        let needs_copy: Vec<bool> = new_tables
            .iter()
            .map(|t| {
                if t.tokens == 0 || t.tokens % self.block_size == 0 {
                    return false; // tip full (or empty): appends go to a fresh block
                }
                let tip = *t.blocks.last().expect("nonempty table has a tip");
                self.refcount[tip] > 1
            })
            .collect();

        let row = self.row();
        for (t, copy) in new_tables.iter_mut().zip(needs_copy) {
            if !copy {
                continue;
            }
            let tip = *t.blocks.last().unwrap();
            let fresh = self.alloc_block()?;
            let span = self.block_size * row;
            for layer in 0..self.layers {
                self.k_pool[layer].copy_within(tip * span..(tip + 1) * span, fresh * span);
                self.v_pool[layer].copy_within(tip * span..(tip + 1) * span, fresh * span);
            }
            *t.blocks.last_mut().unwrap() = fresh;
            self.release(tip);
            self.copy_count += 1;
        }
        self.tables = new_tables;
        Ok(())
    }

    /// Make room for one appended token per beam (allocates fresh tip
    /// blocks where the current tip is full). Call once per decode step,
    /// before the per-layer [`Self::write_token`] passes.
    pub fn begin_append(&mut self) -> Result<()> {
        for b in 0..self.tables.len() {
            let t = &self.tables[b];
            if t.tokens % self.block_size == 0 {
                let fresh = self.alloc_block()?;
                self.tables[b].blocks.push(fresh);
            } else {
                let tip = *t.blocks.last().unwrap();
                debug_assert_eq!(
                    self.refcount[tip], 1,
                    "append into shared block; fork_tables must copy first"
                );
            }
        }
        Ok(())
    }

    /// Write the pending token's K/V for `(layer, beam)` at position
    /// `tokens` (not yet committed).
    pub fn write_token(&mut self, layer: usize, beam: usize, k: &[f32], v: &[f32]) {
        let row = self.row();
        let t = &self.tables[beam];
        let pos = t.tokens;
        let block = t.blocks[pos / self.block_size];
        let off = (block * self.block_size + pos % self.block_size) * row;
        self.k_pool[layer][off..off + row].copy_from_slice(k);
        self.v_pool[layer][off..off + row].copy_from_slice(v);
    }

    /// Commit the appended token on every beam.
    pub fn commit_append(&mut self) {
        for t in &mut self.tables {
            t.tokens += 1;
        }
    }

    /// Gather the first `upto` tokens of `beam` into contiguous K/V
    /// buffers (the per-beam redundant load). Counts one load per block
    /// touched.
    pub fn gather_visible(
        &mut self,
        layer: usize,
        beam: usize,
        upto: usize,
        out_k: &mut Vec<f32>,
        out_v: &mut Vec<f32>,
    ) {
        let row = self.row();
        out_k.clear();
        out_v.clear();
        out_k.reserve(upto * row);
        out_v.reserve(upto * row);
        let table = &self.tables[beam];
        let mut remaining = upto;
        for (i, &block) in table.blocks.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            let here = remaining.min(self.block_size);
            debug_assert!(i * self.block_size < upto);
            let off = block * self.block_size * row;
            out_k.extend_from_slice(&self.k_pool[layer][off..off + here * row]);
            out_v.extend_from_slice(&self.v_pool[layer][off..off + here * row]);
            remaining -= here;
            self.gathered_blocks += 1;
        }
        debug_assert_eq!(remaining, 0, "gather beyond beam length");
    }

    pub fn beam_tokens(&self, beam: usize) -> usize {
        self.tables[beam].tokens
    }

    pub fn num_beams(&self) -> usize {
        self.tables.len()
    }

    pub fn copy_count(&self) -> u64 {
        self.copy_count
    }

    pub fn gathered_blocks(&self) -> u64 {
        self.gathered_blocks
    }

    pub fn blocks_in_use(&self) -> usize {
        self.blocks_in_use
    }

    pub fn peak_blocks(&self) -> usize {
        self.peak_blocks
    }

    /// Peak token-slot footprint: every allocated block counts in full,
    /// including unused trailing slots (that is the fragmentation cost).
    pub fn peak_token_slots(&self) -> usize {
        self.peak_blocks * self.block_size
    }

    pub fn current_token_slots(&self) -> usize {
        self.blocks_in_use * self.block_size
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Refcount conservation: every block's refcount equals the number of
    /// table references to it, and no freed block is referenced.
    pub fn check_refcount_conservation(&self) -> Result<()> {
        let mut counted = vec![0u32; self.refcount.len()];
        for t in &self.tables {
            for &b in t.blocks.iter() {
                counted[b] += 1;
            }
        }
        for &b in &self.prompt_blocks {
            // The root chain holds no reference after init_beams.
            if self.tables.is_empty() {
                counted[b] += 1;
            }
        }
        for (id, (&have, &want)) in self.refcount.iter().zip(counted.iter()).enumerate() {
            if have != want {
                return Err(Error::State(format!(
                    "block {id}: refcount {have} but {want} table references"
                )));
            }
            if have > 0 && self.free_list.contains(&id) {
                return Err(Error::State(format!("block {id} both freed and referenced")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prefilled(prompt_len: usize, block: usize, bw: usize, nd: usize) -> PagedKvCache {
        let blocks = PagedKvCache::blocks_for_request(prompt_len, bw, nd, block);
        let mut p = PagedKvCache::new(1, 1, 2, block, blocks).unwrap();
        for i in 0..prompt_len {
            p.prefill_push(0, &[i as f32, 0.0], &[i as f32, 1.0]).unwrap();
        }
        p.init_beams(bw).unwrap();
        p
    }

    #[test]
    fn misaligned_prompt_first_fork_copies_tail_per_beam() {
        let bw = 512;
        let mut p = prefilled(1000, 16, bw, 3);
        assert_eq!(p.copy_count(), 0);
        let src: Vec<usize> = (0..bw).collect();
        p.fork_tables(&src).unwrap();
        // 1000 mod 16 = 8: one misaligned tail, copied once per beam.
        assert_eq!(p.copy_count(), bw as u64);
        p.check_refcount_conservation().unwrap();
    }

    #[test]
    fn aligned_prompt_first_append_copies_nothing() {
        let bw = 8;
        let mut p = prefilled(1024, 16, bw, 3);
        let src: Vec<usize> = (0..bw).collect();
        p.fork_tables(&src).unwrap();
        assert_eq!(p.copy_count(), 0);
        let before = p.blocks_in_use();
        p.begin_append().unwrap();
        assert_eq!(p.blocks_in_use(), before + bw);
        for b in 0..bw {
            p.write_token(0, b, &[-1.0, -1.0], &[-1.0, -1.0]);
        }
        p.commit_append();
        p.check_refcount_conservation().unwrap();
    }

    #[test]
    fn three_steps_cost_more_than_separated_budget() {
        let bw = 512;
        let mut p = prefilled(1000, 16, bw, 3);
        for step in 0..3 {
            let src: Vec<usize> = (0..bw).collect();
            p.fork_tables(&src).unwrap();
            p.begin_append().unwrap();
            for b in 0..bw {
                p.write_token(0, b, &[step as f32, 2.0], &[step as f32, 3.0]);
            }
            p.commit_append();
        }
        // Separated unshared budget would be exactly bw * nd = 1536 slots.
        assert!(p.peak_token_slots() > 1536);
        p.check_refcount_conservation().unwrap();
    }

    #[test]
    fn gather_returns_contiguous_visible_tokens() {
        let bw = 2;
        let mut p = prefilled(5, 4, bw, 3);
        p.fork_tables(&[0, 1]).unwrap();
        p.begin_append().unwrap();
        p.write_token(0, 0, &[100.0, 0.0], &[100.0, 1.0]);
        p.write_token(0, 1, &[200.0, 0.0], &[200.0, 1.0]);
        p.commit_append();
        let (mut k, mut v) = (Vec::new(), Vec::new());
        p.gather_visible(0, 0, 6, &mut k, &mut v);
        let toks: Vec<f32> = k.chunks(2).map(|c| c[0]).collect();
        assert_eq!(toks, vec![0.0, 1.0, 2.0, 3.0, 4.0, 100.0]);
        p.gather_visible(0, 1, 6, &mut k, &mut v);
        let toks: Vec<f32> = k.chunks(2).map(|c| c[0]).collect();
        assert_eq!(toks, vec![0.0, 1.0, 2.0, 3.0, 4.0, 200.0]);
    }

    #[test]
    fn pool_exhaustion_is_reported() {
        let mut p = PagedKvCache::new(1, 1, 2, 4, 2).unwrap();
        for i in 0..8 {
            p.prefill_push(0, &[i as f32, 0.0], &[0.0, 0.0]).unwrap();
        }
        let err = p.prefill_push(0, &[9.0, 0.0], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::PoolExhausted { .. }));
    }

    #[test]
    fn forks_from_one_beam_share_then_copy() {
        let bw = 4;
        let mut p = prefilled(6, 4, bw, 3);
        // Everyone forks from beam 0; the 2-token tail is shared 4 ways.
        p.fork_tables(&[0, 0, 0, 0]).unwrap();
        assert_eq!(p.copy_count(), 4);
        p.check_refcount_conservation().unwrap();
        // After copying, each beam owns a private tail: appending is safe.
        p.begin_append().unwrap();
        for b in 0..bw {
            p.write_token(0, b, &[b as f32, 9.0], &[0.0, 0.0]);
        }
        p.commit_append();
        let (mut k, mut v) = (Vec::new(), Vec::new());
        for b in 0..bw {
            p.gather_visible(0, b, 7, &mut k, &mut v);
            assert_eq!(k[12], b as f32);
        }
    }
}
