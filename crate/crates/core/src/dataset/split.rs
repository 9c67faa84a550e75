//! Category-stratified train/validation/test partitioning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitIndex {
    pub fn ids(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hex SHA-256 over the three sorted id lists.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            h.update(tag.as_bytes());
            for id in sorted {
                h.update(id.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Largest-remainder split of `n` into parts proportional to `fractions`;
/// ties go to the earlier part.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// `items` are `(id, category)` pairs. Membership depends only on ids,
/// categories and `seed`, not on input order.
pub fn stratified_split(items: &[(u64, usize)], fractions: [f64; 3], seed: u64) -> Result<SplitIndex> {
    if fractions.iter().any(|&f| f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let mut by_cat: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for &(id, c) in items {
        by_cat.entry(c).or_default().push(id);
    }
    let mut out = SplitIndex::default();
    for (cat, mut ids) in by_cat {
        ids.sort_unstable();
        if ids.len() < 3 {
            log::warn!("category {cat} has {} samples; all assigned to train", ids.len());
            out.train.extend(ids);
            continue;
        }
        ids.shuffle(&mut rng_for(seed, &[stream::SPLIT, cat as u64]));
        let counts = largest_remainder(ids.len(), &fractions);
        out.train.extend_from_slice(&ids[..counts[0]]);
        out.val.extend_from_slice(&ids[counts[0]..counts[0] + counts[1]]);
        out.test.extend_from_slice(&ids[counts[0] + counts[1]..]);
    }
    for v in [&mut out.train, &mut out.val, &mut out.test] {
        v.sort_unstable();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_category_hundred() {
        let items: Vec<(u64, usize)> = (0..100).map(|i| (i, 0)).collect();
        let s = stratified_split(&items, DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    }

    #[test]
    fn two_categories_of_ten() {
        // quotas 7 / 1.5 / 1.5: the tied remainder goes to validation
        assert_eq!(largest_remainder(10, &DEFAULT_FRACTIONS), vec![7, 2, 1]);
        let items: Vec<(u64, usize)> = (0..20).map(|i| (i, (i % 2) as usize)).collect();
        let s = stratified_split(&items, DEFAULT_FRACTIONS, 4).unwrap();
        for cat in 0..2 {
            let count = |ids: &[u64]| ids.iter().filter(|&&i| (i % 2) as usize == cat).count();
            assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (7, 2, 1));
        }
    }

    #[test]
    fn order_independent() {
        let items: Vec<(u64, usize)> = (0..57).map(|i| (i * 3 + 1, (i % 4) as usize)).collect();
        let mut rev = items.clone();
        rev.reverse();
        assert_eq!(
            stratified_split(&items, DEFAULT_FRACTIONS, 9).unwrap(),
            stratified_split(&rev, DEFAULT_FRACTIONS, 9).unwrap()
        );
    }

    #[test]
    fn tiny_category_goes_to_train() {
        let items = vec![(1, 0), (2, 0), (3, 1), (4, 1), (5, 1), (6, 1)];
        let s = stratified_split(&items, DEFAULT_FRACTIONS, 0).unwrap();
        assert!(s.train.contains(&1) && s.train.contains(&2));
        assert_eq!(s.len(), 6);
    }

    #[test]
    fn rejects_bad_fractions() {
        assert!(stratified_split(&[(0, 0)], [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn hash_is_order_insensitive_but_membership_sensitive() {
        let a = SplitIndex { train: vec![1, 2], val: vec![3], test: vec![4] };
        let b = SplitIndex { train: vec![2, 1], val: vec![3], test: vec![4] };
        let c = SplitIndex { train: vec![1, 3], val: vec![2], test: vec![4] };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
