//! Deterministic labeled/unlabeled splits.

use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};

/// Labeled/unlabeled split of a training id list.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetPartition {
    /// Ids whose targets are visible, sorted.
    pub labeled_ids: Vec<String>,
    /// Ids used as sources only, sorted.
    pub unlabeled_ids: Vec<String>,
    /// Requested labeled fraction.
    pub fraction: f64,
    /// Seed of the shuffle.
    pub seed: u64,
}

impl DatasetPartition {
    /// Total number of ids.
    pub fn len(&self) -> usize {
        self.labeled_ids.len() + self.unlabeled_ids.len()
    }

    /// Whether the partition holds no ids.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of labeled ids for `fraction` of `n`, rounding half up.
pub fn labeled_count(n: usize, fraction: f64) -> usize {
    let m = (fraction * n as f64 + 0.5) as usize;
    m.min(n)
}

/// Deterministically splits `ids` into a labeled fraction and the rest.
pub fn partition(ids: &[String], fraction: f64, seed: u64) -> Result<DatasetPartition> {
    if ids.is_empty() {
        return Err(CoreError::EmptyIds);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::OutOfRange { name: "fraction", value: fraction });
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = crate::substream(seed, "partition", 0);
    sorted.shuffle(&mut rng);
    let m = labeled_count(sorted.len(), fraction);
    let mut unlabeled_ids = sorted.split_off(m);
    let mut labeled_ids = sorted;
    labeled_ids.sort();
    unlabeled_ids.sort();
    Ok(DatasetPartition { labeled_ids, unlabeled_ids, fraction, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:05}")).collect()
    }

    #[test]
    fn quarter_of_four_hundred() {
        let p = partition(&ids(400), 0.25, 9).unwrap();
        assert_eq!(p.labeled_ids.len(), 100);
        assert_eq!(p.unlabeled_ids.len(), 300);
        assert_eq!(p, partition(&ids(400), 0.25, 9).unwrap());
        assert_ne!(p.labeled_ids, partition(&ids(400), 0.25, 10).unwrap().labeled_ids);
    }

    #[test]
    fn full_fraction_leaves_nothing_unlabeled() {
        let p = partition(&ids(10), 1.0, 0).unwrap();
        assert!(p.unlabeled_ids.is_empty());
        assert_eq!(p.labeled_ids.len(), 10);
    }

    #[test]
    fn rounds_half_up() {
        assert_eq!(labeled_count(10, 0.25), 3);
        assert_eq!(labeled_count(10, 0.24), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(partition(&[], 0.5, 0), Err(CoreError::EmptyIds));
        assert!(partition(&ids(3), 0.0, 0).is_err());
        assert!(partition(&ids(3), 1.5, 0).is_err());
    }
}
