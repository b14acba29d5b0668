use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Episode ids per fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<u64>>,
}

impl FoldSplit {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// `(train ids, held-out ids)` for fold `f`.
    pub fn train_test(&self, f: usize) -> (Vec<u64>, Vec<u64>) {
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != f)
            .flat_map(|(_, ids)| ids.iter().copied())
            .collect();
        (train, self.folds[f].clone())
    }
}

/// Seeded shuffle, grouped by class, then dealt round-robin over the folds
/// so both fold sizes and per-class counts differ by at most one.
pub fn kfold_split(items: &[(u64, usize)], folds: usize, seed: u64) -> Result<FoldSplit> {
    if folds < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {folds}")));
    }
    if items.len() < folds {
        return Err(Error::config(format!(
            "{} episodes cannot fill {folds} folds",
            items.len()
        )));
    }
    let mut order: Vec<(u64, usize)> = items.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|&(_, label)| label);
    let mut out = vec![Vec::new(); folds];
    for (i, (id, _)) in order.into_iter().enumerate() {
        out[i % folds].push(id);
    }
    Ok(FoldSplit { folds: out })
}
