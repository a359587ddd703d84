//! Valid-item vocabulary: a fixed-depth trie over token ids.
//!
//! Every stored item is exactly `nd` tokens; the trie answers
//! prefix-children and membership queries exactly. The level-1 child set
//! doubles as a pre-generated dense mask so the first decode step never
//! computes a mask at runtime.

use std::io::{BufRead, Write};

use crate::beam::mask::NEG_MASK;
use crate::error::{Error, Result};

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, Default)]
struct Node {
    /// `(token, child)` sorted by token; `child == LEAF` marks a complete
    /// item at the last level.
    children: Vec<(u32, u32)>,
}

impl Node {
    fn find(&self, token: u32) -> Option<u32> {
        self.children
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|i| self.children[i].1)
    }
}

#[derive(Debug, Clone)]
pub struct ItemVocabulary {
    nodes: Vec<Node>,
    nd: usize,
    vocab_size: usize,
    item_count: usize,
    level1_tokens: Vec<u32>,
    level1_mask: Vec<f32>,
}

impl ItemVocabulary {
    /// Build from item tuples; duplicates are deduplicated.
    pub fn build<I, T>(items: I, nd: usize, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u32]>,
    {
        if nd == 0 || vocab_size == 0 {
            return Err(Error::Config(format!(
                "vocabulary needs nd >= 1 and vocab_size >= 1, got nd={nd}, vocab_size={vocab_size}"
            )));
        }
        let mut vocab = ItemVocabulary {
            nodes: vec![Node::default()],
            nd,
            vocab_size,
            item_count: 0,
            level1_tokens: Vec::new(),
            level1_mask: vec![NEG_MASK; vocab_size],
        };
        for item in items {
            vocab.insert(item.as_ref())?;
        }
        vocab.level1_tokens = vocab.nodes[0].children.iter().map(|&(t, _)| t).collect();
        for &t in &vocab.level1_tokens {
            vocab.level1_mask[t as usize] = 0.0;
        }
        Ok(vocab)
    }

    fn insert(&mut self, item: &[u32]) -> Result<()> {
        if item.len() != self.nd {
            return Err(Error::Input(format!(
                "item {:?} has {} tokens, vocabulary depth is {}",
                item,
                item.len(),
                self.nd
            )));
        }
        for &t in item {
            if t as usize >= self.vocab_size {
                return Err(Error::Input(format!(
                    "token {t} out of range (vocab size {})",
                    self.vocab_size
                )));
            }
        }
        let mut node = 0usize;
        for (depth, &t) in item.iter().enumerate() {
            let last = depth + 1 == self.nd;
            match self.nodes[node].find(t) {
                Some(child) => {
                    if last {
                        return Ok(()); // duplicate item
                    }
                    node = child as usize;
                }
                None => {
                    let child = if last {
                        LEAF
                    } else {
                        self.nodes.push(Node::default());
                        (self.nodes.len() - 1) as u32
                    };
                    let children = &mut self.nodes[node].children;
                    let at = children.partition_point(|&(tok, _)| tok < t);
                    children.insert(at, (t, child));
                    if last {
                        self.item_count += 1;
                        return Ok(());
                    }
                    node = child as usize;
                }
            }
        }
        unreachable!("insert walks exactly nd levels");
    }

    pub fn nd(&self) -> usize {
        self.nd
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    /// Sorted valid first tokens (the level-1 child set).
    pub fn level1_tokens(&self) -> &[u32] {
        &self.level1_tokens
    }

    /// Dense additive mask for the empty prefix, pre-generated at build.
    pub fn level1_mask(&self) -> &[f32] {
        &self.level1_mask
    }

    fn node_for(&self, prefix: &[u32]) -> Option<&Node> {
        debug_assert!(prefix.len() < self.nd, "prefix must be shorter than nd");
        let mut node = 0usize;
        for &t in prefix {
            match self.nodes[node].find(t) {
                Some(child) if child != LEAF => node = child as usize,
                _ => return None,
            }
        }
        Some(&self.nodes[node])
    }

    /// Valid continuations of `prefix`, or a dead-prefix error. Under
    /// masked selection a dead prefix is impossible; callers treat the
    /// error as an internal assertion.
    pub fn children_into(&self, prefix: &[u32], out: &mut Vec<u32>) -> Result<()> {
        out.clear();
        match self.node_for(prefix) {
            Some(node) => {
                out.extend(node.children.iter().map(|&(t, _)| t));
                Ok(())
            }
            None => Err(Error::DeadPrefix(prefix.to_vec())),
        }
    }

    /// Exact membership test for a full `nd`-token tuple.
    pub fn contains(&self, item: &[u32]) -> bool {
        if item.len() != self.nd {
            return false;
        }
        let mut node = 0usize;
        for (depth, &t) in item.iter().enumerate() {
            match self.nodes[node].find(t) {
                Some(child) => {
                    if depth + 1 == self.nd {
                        return child == LEAF;
                    }
                    if child == LEAF {
                        return false;
                    }
                    node = child as usize;
                }
                None => return false,
            }
        }
        unreachable!()
    }

    /// Parse the on-disk format: one item per line, `nd` space-separated
    /// token ids.
    pub fn read<R: BufRead>(reader: R, nd: usize, vocab_size: usize) -> Result<Self> {
        let mut items: Vec<Vec<u32>> = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<u32> = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<u32>()
                        .map_err(|_| Error::Input(format!("line {}: bad token {s:?}", ln + 1)))
                })
                .collect::<Result<_>>()?;
            if toks.len() != nd {
                return Err(Error::Input(format!(
                    "line {}: expected {nd} tokens, got {}",
                    ln + 1,
                    toks.len()
                )));
            }
            items.push(toks);
        }
        Self::build(items, nd, vocab_size)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut stack: Vec<(usize, Vec<u32>)> = vec![(0, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            for &(t, child) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(t);
                if child == LEAF {
                    let line: Vec<String> = p.iter().map(|t| t.to_string()).collect();
                    writeln!(w, "{}", line.join(" "))?;
                } else {
                    stack.push((child as usize, p));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn empty_vocabulary_has_no_children() {
        let v = ItemVocabulary::build(Vec::<Vec<u32>>::new(), 3, 16).unwrap();
        assert_eq!(v.item_count(), 0);
        let mut out = Vec::new();
        v.children_into(&[], &mut out).unwrap();
        assert!(out.is_empty());
        assert!(v.level1_tokens().is_empty());
    }

    #[test]
    fn single_item_paths() {
        let v = ItemVocabulary::build(vec![vec![1u32, 2, 3]], 3, 16).unwrap();
        assert_eq!(v.item_count(), 1);
        let mut out = Vec::new();
        v.children_into(&[], &mut out).unwrap();
        assert_eq!(out, vec![1]);
        v.children_into(&[1, 2], &mut out).unwrap();
        assert_eq!(out, vec![3]);
        assert!(v.contains(&[1, 2, 3]));
        assert!(!v.contains(&[1, 2, 4]));
    }

    #[test]
    fn dead_prefix_is_an_error() {
        let v = ItemVocabulary::build(vec![vec![1u32, 2, 3]], 3, 16).unwrap();
        let mut out = Vec::new();
        assert!(matches!(
            v.children_into(&[5], &mut out),
            Err(Error::DeadPrefix(_))
        ));
    }

    #[test]
    fn wrong_arity_and_range_are_input_errors() {
        assert!(matches!(
            ItemVocabulary::build(vec![vec![1u32, 2]], 3, 16),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            ItemVocabulary::build(vec![vec![1u32, 2, 99]], 3, 16),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn duplicates_are_deduplicated() {
        let v = ItemVocabulary::build(vec![vec![1u32, 2, 3], vec![1, 2, 3]], 3, 16).unwrap();
        assert_eq!(v.item_count(), 1);
    }

    #[test]
    fn membership_agrees_with_hash_set_oracle() {
        // 10,000 random tuples over V=256, then 1,000 probes.
        let mut state = 0x1234_5678_u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        let items: Vec<Vec<u32>> = (0..10_000)
            .map(|_| (0..3).map(|_| (next() % 256) as u32).collect())
            .collect();
        let set: HashSet<Vec<u32>> = items.iter().cloned().collect();
        let v = ItemVocabulary::build(items.clone(), 3, 256).unwrap();
        assert_eq!(v.item_count(), set.len());
        for _ in 0..1_000 {
            let probe: Vec<u32> = (0..3).map(|_| (next() % 256) as u32).collect();
            assert_eq!(v.contains(&probe), set.contains(&probe));
        }
    }

    #[test]
    fn file_round_trip() {
        let items = vec![vec![1u32, 2, 3], vec![1, 2, 7], vec![4, 0, 9]];
        let v = ItemVocabulary::build(items, 3, 16).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let back = ItemVocabulary::read(buf.as_slice(), 3, 16).unwrap();
        assert_eq!(back.item_count(), 3);
        assert!(back.contains(&[1, 2, 7]));
        assert!(back.contains(&[4, 0, 9]));
    }
}
