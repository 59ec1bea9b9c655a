//! Seeded dataset splits.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::metrics::MultiHot;
use crate::rng::substream;

/// Disjoint, exhaustive train/validation index split with
/// `round(fraction * n)` validation examples.
pub fn split_train_val(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::contract("need at least two examples to split"));
    }
    if !(0.0..1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::contract(format!(
            "validation fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split/train-val"));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Partition `[0, n)` into `k` seeded folds whose sizes differ by at most
/// one; earlier folds take the remainder.
pub fn k_fold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::contract(format!("cannot cut {n} examples into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split/k-fold"));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold: Vec<usize> = idx[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

/// Threshold probabilities into a multi-hot prediction; `p >= tau` is
/// positive.
pub fn binarize(probs: &[f64], tau: f64) -> MultiHot {
    MultiHot::from_bools(&probs.iter().map(|&p| p >= tau).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ninety_ten_split_cardinalities() {
        let (train, val) = split_train_val(100, 0.1, 3).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(val.len(), 10);
    }

    #[test]
    fn split_is_deterministic_and_exhaustive() {
        let (t1, v1) = split_train_val(37, 0.2, 9).unwrap();
        let (t2, v2) = split_train_val(37, 0.2, 9).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        let mut all: Vec<usize> = t1.iter().chain(&v1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        let (t3, _) = split_train_val(37, 0.2, 10).unwrap();
        assert_ne!(t1, t3, "different seeds give different splits");
    }

    #[test]
    fn tiny_dataset_is_rejected() {
        assert!(split_train_val(1, 0.1, 0).is_err());
    }

    #[test]
    fn five_folds_of_twenty() {
        let folds = k_fold_split(100, 5, 4).unwrap();
        assert_eq!(folds.len(), 5);
        assert!(folds.iter().all(|f| f.len() == 20));
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn uneven_folds_differ_by_at_most_one() {
        let folds = k_fold_split(7, 5, 0).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 1, 2, 2]);
    }

    #[test]
    fn more_folds_than_examples_is_an_error() {
        assert!(k_fold_split(3, 5, 0).is_err());
    }

    #[test]
    fn binarize_boundary_is_positive() {
        let out = binarize(&[0.49, 0.5, 0.51], 0.5);
        assert_eq!(out.bits(), &[0, 1, 1]);
    }

    #[test]
    fn binarize_extremes() {
        assert_eq!(binarize(&[0.1, 0.2], 0.5).count_positive(), 0);
        assert_eq!(binarize(&[0.1, 0.2], 0.0).count_positive(), 2);
    }
}
