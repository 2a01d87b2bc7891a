//! Sharded-ensemble data model and majority-vote aggregation.
//!
//! Every constituent model is trained on one shard. An inference sample is
//! answered by counting the labels predicted by the currently serving
//! constituent models and returning the most frequent one; ties go to the
//! smaller label index.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{invalid, Error, Result};

/// Dense class label in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelId(pub usize);

/// Shard index in `[0, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShardId(pub usize);

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A shard together with the version of the constituent model serving it.
/// Version 0 is the initial training; each completed retraining adds one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShardVersion {
    pub shard: ShardId,
    pub version: u32,
}

/// Per-shard predicted labels for one sample, `labels[k]` from shard `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PredictionVector {
    labels: Vec<LabelId>,
}

impl PredictionVector {
    pub fn new(labels: Vec<LabelId>) -> Self {
        Self { labels }
    }

    pub fn from_raw(labels: &[usize]) -> Self {
        Self::new(labels.iter().copied().map(LabelId).collect())
    }

    pub fn labels(&self) -> &[LabelId] {
        &self.labels
    }

    pub fn num_shards(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, shard: ShardId) -> LabelId {
        self.labels[shard.0]
    }

    pub fn set(&mut self, shard: ShardId, label: LabelId) {
        self.labels[shard.0] = label;
    }

    /// Checks every entry against `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if num_classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        match self.labels.iter().position(|l| l.0 >= num_classes) {
            Some(shard) => Err(Error::LabelOutOfRange {
                shard,
                label: self.labels[shard].0,
                num_classes,
            }),
            None => Ok(()),
        }
    }
}

/// Number of shards voting for each label.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VoteCount {
    counts: Vec<usize>,
}

impl VoteCount {
    pub fn new(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, label: LabelId) -> usize {
        self.counts[label.0]
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Shards that hold at least one unlearning request not yet executed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImpactedSet {
    shards: BTreeSet<ShardId>,
}

impl ImpactedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_indices(indices: &[usize]) -> Self {
        indices.iter().map(|&k| ShardId(k)).collect()
    }

    pub fn insert(&mut self, shard: ShardId) -> bool {
        self.shards.insert(shard)
    }

    pub fn remove(&mut self, shard: ShardId) -> bool {
        self.shards.remove(&shard)
    }

    pub fn contains(&self, shard: ShardId) -> bool {
        self.shards.contains(&shard)
    }

    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ShardId> + '_ {
        self.shards.iter().copied()
    }

    pub fn validate(&self, num_shards: usize) -> Result<()> {
        match self.shards.iter().find(|s| s.0 >= num_shards) {
            Some(s) => Err(invalid(format!(
                "impacted shard {s} is outside [0, {num_shards})"
            ))),
            None => Ok(()),
        }
    }
}

impl FromIterator<ShardId> for ImpactedSet {
    fn from_iter<I: IntoIterator<Item = ShardId>>(iter: I) -> Self {
        Self {
            shards: iter.into_iter().collect(),
        }
    }
}

/// Counts how many shards predicted each label.
pub fn count_votes(preds: &PredictionVector, num_classes: usize) -> Result<VoteCount> {
    preds.validate(num_classes)?;
    let mut counts = vec![0usize; num_classes];
    for label in preds.labels() {
        counts[label.0] += 1;
    }
    Ok(VoteCount::new(counts))
}

/// Majority vote with ties broken towards the smaller label.
pub fn aggregate(counts: &VoteCount) -> Result<LabelId> {
    if counts.counts.is_empty() || counts.total() == 0 {
        return Err(invalid("cannot aggregate empty or all-zero vote counts"));
    }
    let mut best = 0;
    for (label, &c) in counts.counts.iter().enumerate().skip(1) {
        // strict comparison keeps the first (smallest) label among equals
        if c > counts.counts[best] {
            best = label;
        }
    }
    Ok(LabelId(best))
}

/// `aggregate(count_votes(preds))`.
pub fn predict_ensemble(preds: &PredictionVector, num_classes: usize) -> Result<LabelId> {
    aggregate(&count_votes(preds, num_classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(raw: &[usize], c: usize) -> Vec<usize> {
        count_votes(&PredictionVector::from_raw(raw), c)
            .unwrap()
            .counts()
            .to_vec()
    }

    #[test]
    fn counts_multiplicities() {
        assert_eq!(counts(&[0, 0, 1], 2), vec![2, 1]);
        assert_eq!(counts(&[1, 1, 1, 1], 3), vec![0, 4, 0]);
        assert_eq!(counts(&[0, 1, 2, 0, 1], 3), vec![2, 2, 1]);
    }

    #[test]
    fn out_of_range_label_names_the_shard() {
        let err = count_votes(&PredictionVector::from_raw(&[0, 1, 5, 0]), 3).unwrap_err();
        assert_eq!(
            err,
            Error::LabelOutOfRange {
                shard: 2,
                label: 5,
                num_classes: 3
            }
        );
        assert!(count_votes(&PredictionVector::from_raw(&[0]), 1).is_err());
    }

    #[test]
    fn aggregate_breaks_ties_to_smaller_label() {
        assert_eq!(aggregate(&VoteCount::new(vec![2, 1])).unwrap(), LabelId(0));
        assert_eq!(aggregate(&VoteCount::new(vec![1, 1])).unwrap(), LabelId(0));
        assert_eq!(aggregate(&VoteCount::new(vec![0, 3, 3])).unwrap(), LabelId(1));
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(aggregate(&VoteCount::new(vec![])).is_err());
        assert!(aggregate(&VoteCount::new(vec![0, 0, 0])).is_err());
    }

    proptest! {
        #[test]
        fn winner_is_exact_argmax(raw in prop::collection::vec(0usize..4, 1..12)) {
            let vc = count_votes(&PredictionVector::from_raw(&raw), 4).unwrap();
            prop_assert_eq!(vc.total(), raw.len());
            let w = aggregate(&vc).unwrap();
            for (y, &c) in vc.counts().iter().enumerate() {
                prop_assert!(vc.count(w) >= c);
                if c == vc.count(w) {
                    prop_assert!(w.0 <= y);
                }
            }
        }

        #[test]
        fn shard_order_does_not_matter(raw in prop::collection::vec(0usize..4, 1..12), rot in 0usize..12) {
            let mut shuffled = raw.clone();
            shuffled.rotate_left(rot % raw.len());
            shuffled.reverse();
            prop_assert_eq!(
                predict_ensemble(&PredictionVector::from_raw(&raw), 4).unwrap(),
                predict_ensemble(&PredictionVector::from_raw(&shuffled), 4).unwrap()
            );
        }
    }
}
