use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint patient-id sets covering every patient exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn held_out(&self, fold: usize) -> Result<&[String]> {
        self.folds
            .get(fold)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("fold {fold} out of range ({} folds)", self.folds.len())))
    }

    /// Patients of every fold except `fold`.
    pub fn training(&self, fold: usize) -> Result<Vec<String>> {
        self.held_out(fold)?;
        Ok(self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect())
    }
}

/// Shuffles the patients with `seed` and deals them round-robin into
/// `n_folds` folds, so fold sizes differ by at most one.
pub fn split_folds(patient_ids: &[String], n_folds: usize, seed: u64) -> Result<FoldSplit> {
    if n_folds < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if patient_ids.len() < n_folds {
        return Err(Error::invalid(format!(
            "{} patients cannot fill {n_folds} folds",
            patient_ids.len()
        )));
    }
    let mut seen = BTreeSet::new();
    for id in patient_ids {
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate patient id `{id}`")));
        }
    }
    // Sort first so the split depends on the id set, not the input order.
    let mut ids: Vec<String> = seen.into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); n_folds];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % n_folds].push(id);
    }
    Ok(FoldSplit { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("patient{i:03}")).collect()
    }

    #[test]
    fn twenty_into_five() {
        let split = split_folds(&ids(20), 5, 1).unwrap();
        assert!(split.folds.iter().all(|f| f.len() == 4));
    }

    #[test]
    fn twenty_three_into_five() {
        let split = split_folds(&ids(23), 5, 9).unwrap();
        let mut sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![4, 4, 5, 5, 5]);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(split_folds(&ids(17), 5, 3).unwrap(), split_folds(&ids(17), 5, 3).unwrap());
    }

    #[test]
    fn rejects_duplicates_and_too_few() {
        let mut v = ids(6);
        v.push("patient001".into());
        assert!(split_folds(&v, 5, 0).is_err());
        assert!(split_folds(&ids(3), 5, 0).is_err());
        assert!(split_folds(&ids(3), 1, 0).is_err());
    }

    #[test]
    fn training_excludes_held_out() {
        let split = split_folds(&ids(10), 5, 0).unwrap();
        let train = split.training(2).unwrap();
        assert_eq!(train.len(), 8);
        assert!(split.held_out(2).unwrap().iter().all(|p| !train.contains(p)));
    }

    proptest! {
        #[test]
        fn folds_partition_the_patients(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let all = ids(n);
            let split = split_folds(&all, k, seed).unwrap();
            let mut union: Vec<String> = split.folds.iter().flatten().cloned().collect();
            prop_assert_eq!(union.len(), n);
            union.sort();
            union.dedup();
            prop_assert_eq!(union.len(), n);
            let sizes: Vec<usize> = split.folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
