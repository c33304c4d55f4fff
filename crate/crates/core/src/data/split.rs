use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_SPLIT};
use crate::sparse::SparseBinary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::Split(format!("ratios must be positive, got {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!("ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// `(train, validation, test)` sizes for `n` groups.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        if n < 3 {
            return Err(Error::Split(format!(
                "{n} groups cannot fill three non-empty partitions"
            )));
        }
        let val = ((self.validation * n as f64).round() as usize).max(1);
        let test = ((self.test * n as f64).round() as usize).max(1);
        if val + test >= n {
            return Err(Error::Split(format!(
                "{n} groups leave no training groups after {val} validation and {test} test"
            )));
        }
        Ok((n - val - test, val, test))
    }
}

/// Held-out group-item interactions for a set of groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Holdout {
    /// Sorted group ids.
    pub groups: Vec<usize>,
    /// Held-out items per entry of `groups`, sorted.
    pub items: Vec<Vec<usize>>,
}

impl Holdout {
    fn from_groups(mut groups: Vec<usize>, full: &SparseBinary) -> Self {
        groups.sort_unstable();
        let items = groups.iter().map(|&g| full.row(g).to_vec()).collect();
        Self { groups, items }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.groups
            .iter()
            .copied()
            .zip(self.items.iter().map(Vec::as_slice))
    }
}

/// Group-level split. `train` keeps all users, user-item interactions and the
/// full membership; its group-item matrix only has rows for training groups.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: InteractionDataset,
    pub train_groups: Vec<usize>,
    pub validation: Holdout,
    pub test: Holdout,
    pub split_seed: u64,
}

impl SplitDataset {
    /// Group-item interaction count of group `g` before the split.
    pub fn full_interaction_count(&self, g: usize) -> usize {
        let in_holdout = |h: &Holdout| {
            h.groups
                .binary_search(&g)
                .ok()
                .map(|k| h.items[k].len())
        };
        in_holdout(&self.test)
            .or_else(|| in_holdout(&self.validation))
            .unwrap_or_else(|| self.train.group_item().row_len(g))
    }
}

/// Randomly partitions groups into train/validation/test.
pub fn split_groups(ds: &InteractionDataset, ratios: SplitRatios, seed: u64) -> Result<SplitDataset> {
    let n = ds.num_groups();
    let (n_train, n_val, _) = ratios.sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_SPLIT, 0));

    let mut train_groups = order[..n_train].to_vec();
    train_groups.sort_unstable();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();

    let full = ds.group_item();
    let train_gi = SparseBinary::from_pairs(
        n,
        ds.num_items(),
        train_groups
            .iter()
            .flat_map(|&g| full.row(g).iter().map(move |&i| (g, i))),
    )?;
    Ok(SplitDataset {
        train: ds.with_group_item(train_gi)?,
        train_groups,
        validation: Holdout::from_groups(val, full),
        test: Holdout::from_groups(test, full),
        split_seed: seed,
    })
}
