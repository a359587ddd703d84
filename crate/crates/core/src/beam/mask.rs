//! Additive logit masks for the valid-path constraint.
//!
//! Masks are added element-wise to the model's logits before the softmax,
//! driving invalid tokens' probabilities to effectively zero without ever
//! producing a non-finite value.

use crate::beam::vocab::ItemVocabulary;
use crate::error::{Error, Result};

/// Additive mask value for invalid tokens. Finite, so masked logits stay
/// finite through log-softmax; its magnitude dwarfs any sane logit plus
/// `ln(V)` by orders of magnitude, so a masked entry can never enter a
/// top-K while a valid alternative exists.
pub const NEG_MASK: f32 = -1.0e4;

/// Scores at or below this can only come from masked entries; selection
/// excludes them.
pub const MASK_EXCLUDE_THRESHOLD: f32 = NEG_MASK / 2.0;

/// Reusable mask buffer: all entries `NEG_MASK` except the touched
/// positions set to zero in the current use. Sparse reloads reset only the
/// touched positions.
#[derive(Debug, Clone)]
pub struct MaskBuffer {
    values: Vec<f32>,
    touched: Vec<u32>,
}

impl MaskBuffer {
    pub fn new(vocab_size: usize) -> Self {
        MaskBuffer {
            values: vec![NEG_MASK; vocab_size],
            touched: Vec::new(),
        }
    }

    /// Restore every touched position to `NEG_MASK`.
    pub fn reset(&mut self) {
        for &t in &self.touched {
            self.values[t as usize] = NEG_MASK;
        }
        self.touched.clear();
    }

    /// Sparse in-place update: reset the previous use, then unmask `tokens`.
    pub fn load_sparse(&mut self, tokens: &[u32]) {
        self.reset();
        for &t in tokens {
            debug_assert!((t as usize) < self.values.len());
            self.values[t as usize] = 0.0;
            self.touched.push(t);
        }
    }

    /// Dense load from a pre-generated mask (the empty-prefix mask built at
    /// vocabulary load). `zero_positions` lists the unmasked entries so the
    /// touched bookkeeping stays exact.
    pub fn load_dense(&mut self, mask: &[f32], zero_positions: &[u32]) {
        debug_assert_eq!(mask.len(), self.values.len());
        self.values.copy_from_slice(mask);
        self.touched.clear();
        self.touched.extend_from_slice(zero_positions);
    }

    /// Element-wise addition into a logits row.
    pub fn apply(&self, row: &mut [f32]) {
        debug_assert_eq!(row.len(), self.values.len());
        for (r, m) in row.iter_mut().zip(self.values.iter()) {
            *r += m;
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }
}

/// How a mask is materialized for a prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Pre-generated dense mask; valid only for the empty prefix.
    Dense,
    /// Sparse in-place update from the trie children.
    Sparse,
}

/// Fill `buf` so that `buf[t] == 0` exactly when `prefix ⊕ t` extends to at
/// least one valid item.
pub fn mask_for_prefix(
    vocab: &ItemVocabulary,
    prefix: &[u32],
    buf: &mut MaskBuffer,
    mode: MaskMode,
    scratch: &mut Vec<u32>,
) -> Result<()> {
    if prefix.len() >= vocab.nd() {
        return Err(Error::Input(format!(
            "prefix length {} must be below item depth {}",
            prefix.len(),
            vocab.nd()
        )));
    }
    match mode {
        MaskMode::Dense => {
            if !prefix.is_empty() {
                return Err(Error::Config(
                    "dense mask mode is only valid for the empty prefix".into(),
                ));
            }
            buf.load_dense(vocab.level1_mask(), vocab.level1_tokens());
            Ok(())
        }
        MaskMode::Sparse => {
            vocab.children_into(prefix, scratch)?;
            buf.load_sparse(scratch);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> ItemVocabulary {
        ItemVocabulary::build(vec![vec![1u32, 2, 3], vec![1, 2, 7]], 3, 16).unwrap()
    }

    #[test]
    fn empty_prefix_unmasks_only_valid_first_tokens() {
        let v = vocab();
        let mut buf = MaskBuffer::new(16);
        let mut scratch = Vec::new();
        mask_for_prefix(&v, &[], &mut buf, MaskMode::Dense, &mut scratch).unwrap();
        for (t, &m) in buf.values().iter().enumerate() {
            if t == 1 {
                assert_eq!(m, 0.0);
            } else {
                assert_eq!(m, NEG_MASK);
            }
        }
    }

    #[test]
    fn deep_prefix_unmasks_trie_children() {
        let v = vocab();
        let mut buf = MaskBuffer::new(16);
        let mut scratch = Vec::new();
        mask_for_prefix(&v, &[1, 2], &mut buf, MaskMode::Sparse, &mut scratch).unwrap();
        let zeros: Vec<usize> = buf
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 0.0)
            .map(|(t, _)| t)
            .collect();
        assert_eq!(zeros, vec![3, 7]);
    }

    #[test]
    fn dense_mode_rejected_for_nonempty_prefix() {
        let v = vocab();
        let mut buf = MaskBuffer::new(16);
        let mut scratch = Vec::new();
        assert!(matches!(
            mask_for_prefix(&v, &[1], &mut buf, MaskMode::Dense, &mut scratch),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sparse_reuse_equals_fresh_dense_recompute() {
        let v = ItemVocabulary::build(
            vec![vec![1u32, 2, 3], vec![1, 4, 5], vec![6, 2, 0], vec![6, 7, 7]],
            3,
            16,
        )
        .unwrap();
        let mut buf = MaskBuffer::new(16);
        let mut scratch = Vec::new();
        // Reuse the buffer across several prefixes; the final state must
        // equal a fresh computation of the last prefix.
        for prefix in [&[1u32][..], &[6], &[1, 4], &[6, 7]] {
            mask_for_prefix(&v, prefix, &mut buf, MaskMode::Sparse, &mut scratch).unwrap();
        }
        let mut fresh = MaskBuffer::new(16);
        mask_for_prefix(&v, &[6, 7], &mut fresh, MaskMode::Sparse, &mut scratch).unwrap();
        assert_eq!(buf.values(), fresh.values());
    }

    #[test]
    fn reset_restores_all_neg_mask() {
        let mut buf = MaskBuffer::new(8);
        buf.load_sparse(&[1, 5]);
        assert_eq!(buf.touched(), &[1, 5]);
        buf.reset();
        assert!(buf.values().iter().all(|&m| m == NEG_MASK));
        assert!(buf.touched().is_empty());
    }

    #[test]
    fn apply_is_elementwise_addition() {
        let mut buf = MaskBuffer::new(4);
        buf.load_sparse(&[2]);
        let mut row = vec![1.0, 2.0, 3.0, 4.0];
        buf.apply(&mut row);
        assert_eq!(row[2], 3.0);
        for (i, &r) in row.iter().enumerate() {
            if i != 2 {
                assert!(r <= MASK_EXCLUDE_THRESHOLD);
            }
        }
    }
}
