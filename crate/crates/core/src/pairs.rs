//! Ordered pair construction over a mini-batch.
//!
//! Every ordered pair (i, j) of batch indices is enumerated row-major and
//! labeled +1 when the two examples share a class and -1 otherwise. Pairs
//! are grouped per anchor i into positive and negative index sets, which is
//! the grouping the anchor-based solvers and the recovered losses operate on.

use crate::error::{Error, Result};

/// The ordered pair set of one mini-batch with labels and anchor groups.
#[derive(Debug, Clone)]
pub struct PairSystem {
    pairs: Vec<(usize, usize)>,
    labels: Vec<i8>,
    pos_groups: Vec<Vec<usize>>,
    neg_groups: Vec<Vec<usize>>,
    include_self: bool,
    batch_size: usize,
}

impl PairSystem {
    /// Number of pairs.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The (anchor, other) example indices of pair `k`.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        self.pairs[k]
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Pair label: +1 for same-class, -1 for different-class.
    pub fn label(&self, k: usize) -> i8 {
        self.labels[k]
    }

    pub fn is_positive(&self, k: usize) -> bool {
        self.labels[k] > 0
    }

    /// Pair indices of anchor `i`'s positive pairs.
    pub fn pos_group(&self, i: usize) -> &[usize] {
        &self.pos_groups[i]
    }

    /// Pair indices of anchor `i`'s negative pairs.
    pub fn neg_group(&self, i: usize) -> &[usize] {
        &self.neg_groups[i]
    }

    /// Total number of positive pairs P.
    pub fn pos_count(&self) -> usize {
        self.pos_groups.iter().map(Vec::len).sum()
    }

    /// Total number of negative pairs N.
    pub fn neg_count(&self) -> usize {
        self.neg_groups.iter().map(Vec::len).sum()
    }

    pub fn include_self(&self) -> bool {
        self.include_self
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}

/// Enumerate all ordered pairs of a batch from its class labels.
///
/// With `include_self` the self-pairs (i, i) are kept (and are positive),
/// giving B^2 pairs; otherwise B(B-1).
pub fn build_pair_system(labels: &[usize], include_self: bool) -> Result<PairSystem> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::InvalidBatch(format!(
            "need at least 2 examples to form pairs, got {b}"
        )));
    }

    let mut pairs = Vec::with_capacity(b * b);
    let mut pair_labels = Vec::with_capacity(b * b);
    let mut pos_groups = vec![Vec::new(); b];
    let mut neg_groups = vec![Vec::new(); b];

    for i in 0..b {
        for j in 0..b {
            if i == j && !include_self {
                continue;
            }
            let k = pairs.len();
            pairs.push((i, j));
            if labels[i] == labels[j] {
                pair_labels.push(1);
                pos_groups[i].push(k);
            } else {
                pair_labels.push(-1);
                neg_groups[i].push(k);
            }
        }
    }

    Ok(PairSystem {
        pairs,
        labels: pair_labels,
        pos_groups,
        neg_groups,
        include_self,
        batch_size: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_classes_no_self() {
        let ps = build_pair_system(&[0, 0, 1], false).unwrap();
        assert_eq!(ps.len(), 6);
        let positives: Vec<_> = (0..ps.len())
            .filter(|&k| ps.is_positive(k))
            .map(|k| ps.pair(k))
            .collect();
        assert_eq!(positives, vec![(0, 1), (1, 0)]);
        assert_eq!(ps.pos_count(), 2);
        assert_eq!(ps.neg_count(), 4);
    }

    #[test]
    fn self_pairs_are_positive() {
        let ps = build_pair_system(&[0, 0, 1], true).unwrap();
        assert_eq!(ps.len(), 9);
        let self_pairs: Vec<_> = (0..ps.len())
            .filter(|&k| {
                let (i, j) = ps.pair(k);
                i == j
            })
            .collect();
        assert_eq!(self_pairs.len(), 3);
        assert!(self_pairs.iter().all(|&k| ps.is_positive(k)));
    }

    #[test]
    fn no_same_class_pair() {
        let ps = build_pair_system(&[0, 1], false).unwrap();
        assert_eq!(ps.pos_count(), 0);
        assert_eq!(ps.neg_count(), 2);
    }

    #[test]
    fn singleton_batch_rejected() {
        assert!(matches!(
            build_pair_system(&[0], false),
            Err(Error::InvalidBatch(_))
        ));
    }

    #[test]
    fn groups_partition_anchor_pairs() {
        let ps = build_pair_system(&[0, 1, 0, 2, 1], false).unwrap();
        for i in 0..5 {
            let mut ks: Vec<usize> = ps
                .pos_group(i)
                .iter()
                .chain(ps.neg_group(i))
                .copied()
                .collect();
            ks.sort_unstable();
            let expected: Vec<usize> = (0..ps.len()).filter(|&k| ps.pair(k).0 == i).collect();
            assert_eq!(ks, expected);
        }
        assert_eq!(ps.pos_count() + ps.neg_count(), ps.len());
    }
}
