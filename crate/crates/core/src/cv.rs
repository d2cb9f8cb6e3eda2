//! Cross-validation folds that keep every group (company) in a single fold.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fold assignment for each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupFolds {
    fold_of: Vec<usize>,
    num_folds: usize,
}

impl GroupFolds {
    /// Distinct groups are shuffled with `seed` and dealt round-robin into
    /// `min(v, #groups)` folds.
    pub fn new<S: AsRef<str>>(groups: &[S], v: usize, seed: u64) -> Result<Self> {
        if v < 2 {
            return Err(Error::Argument(format!("need at least 2 folds, got {v}")));
        }
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for g in groups {
            let n = index.len();
            index.entry(g.as_ref()).or_insert(n);
        }
        if index.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "cross-validation needs at least 2 groups, got {}",
                index.len()
            )));
        }
        let mut names: Vec<&str> = index.keys().copied().collect();
        names.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let num_folds = v.min(names.len());
        let fold_of_group: BTreeMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, g)| (*g, i % num_folds))
            .collect();
        Ok(GroupFolds {
            fold_of: groups.iter().map(|g| fold_of_group[g.as_ref()]).collect(),
            num_folds,
        })
    }

    pub fn num_folds(&self) -> usize {
        self.num_folds
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.fold_of[row]
    }

    /// `(train rows, validation rows)` for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.fold_of.len()).partition(|&i| self.fold_of[i] != f)
    }
}
