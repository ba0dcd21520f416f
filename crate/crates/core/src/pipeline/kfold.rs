//! Stratified k-fold partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `k` disjoint folds of sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
    /// `(negatives, positives)` per fold.
    pub class_counts: Vec<(usize, usize)>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.folds.iter().map(Vec::len).collect()
    }

    /// Held-out indices and the remaining training indices for fold `i`.
    pub fn split(&self, i: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let held = self
            .folds
            .get(i)
            .ok_or(Error::IndexOutOfRange {
                index: i,
                len: self.k(),
            })?
            .clone();
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        Ok((train, held))
    }
}

/// Shuffles each class with `seed` and deals it round-robin. Positives are
/// dealt first; negatives continue from the next fold, which keeps fold
/// sizes within one of each other.
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid("k", "need at least 2 folds"));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(Error::InvalidLabel(y));
        }
        by_class[y as usize].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < k {
            return Err(Error::invalid(
                "k",
                format!("{k} folds but class {c} has only {} samples", members.len()),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut class_counts = vec![(0, 0); k];
    let mut next = 0;
    for class in [1usize, 0] {
        let mut members = by_class[class].clone();
        members.shuffle(&mut rng);
        for idx in members {
            folds[next].push(idx);
            if class == 1 {
                class_counts[next].1 += 1;
            } else {
                class_counts[next].0 += 1;
            }
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit {
        folds,
        class_counts,
    })
}

/// Stratified hold-out: about `fraction` of each class goes to the second list.
/// A class with fewer than two members stays entirely in the first.
pub fn stratified_holdout(
    indices: &[usize],
    labels: &[u8],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for class in [1u8, 0] {
        let mut members: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| labels[i] == class)
            .collect();
        members.shuffle(&mut rng);
        let n = if members.len() < 2 {
            0
        } else {
            ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len() - 1)
        };
        held.extend_from_slice(&members[..n]);
        keep.extend_from_slice(&members[n..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    (keep, held)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(pos: usize, neg: usize) -> Vec<u8> {
        let mut v = vec![1u8; pos];
        v.extend(vec![0u8; neg]);
        v
    }

    #[test]
    fn ten_samples_five_folds() {
        let s = stratified_kfold(&labels(5, 5), 5, 0).unwrap();
        assert_eq!(s.sizes(), vec![2; 5]);
        assert!(s.class_counts.iter().all(|&c| c == (1, 1)));
    }

    #[test]
    fn rejects_too_many_folds() {
        assert!(stratified_kfold(&labels(3, 10), 5, 0).is_err());
        assert!(stratified_kfold(&labels(3, 10), 1, 0).is_err());
    }

    #[test]
    fn split_excludes_held_fold() {
        let s = stratified_kfold(&labels(6, 9), 3, 4).unwrap();
        let (train, held) = s.split(1).unwrap();
        assert_eq!(train.len() + held.len(), 15);
        assert!(held.iter().all(|i| !train.contains(i)));
        assert!(s.split(3).is_err());
    }

    #[test]
    fn holdout_is_stratified() {
        let l = labels(20, 40);
        let idx: Vec<usize> = (0..60).collect();
        let (keep, held) = stratified_holdout(&idx, &l, 0.1, 1);
        assert_eq!(held.len(), 6);
        assert_eq!(held.iter().filter(|&&i| l[i] == 1).count(), 2);
        assert_eq!(keep.len(), 54);
    }

    proptest! {
        #[test]
        fn partition_invariants(pos in 2usize..60, neg in 2usize..60, k in 2usize..6, seed in any::<u64>()) {
            prop_assume!(k <= pos && k <= neg);
            let l = labels(pos, neg);
            let s = stratified_kfold(&l, k, seed).unwrap();
            let mut seen = vec![0u8; l.len()];
            for f in &s.folds {
                for &i in f {
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let sizes = s.sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let expected = pos as f64 / k as f64;
            for (f, &(n, p)) in s.folds.iter().zip(&s.class_counts) {
                prop_assert_eq!(f.iter().filter(|&&i| l[i] == 1).count(), p);
                prop_assert_eq!(f.len(), n + p);
                prop_assert!((p as f64 - expected).abs() < 1.0);
            }
            prop_assert_eq!(stratified_kfold(&l, k, seed).unwrap(), s);
        }
    }
}
