//! Interaction data: user-item matrix R, group-item matrix S and group
//! membership, plus loading, splitting, negative sampling and synthetic
//! generation.

mod io;
mod sampling;
mod split;
mod synthetic;

pub use io::{load_dataset, load_dataset_compacted, save_dataset, IdMapping};
pub use sampling::{SubjectKind, TrainingTriple, TripleSampler};
pub use split::{split_groups, Holdout, SplitDataset, SplitRatios};
pub use synthetic::{generate_synthetic, SynthConfig};

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sparse::SparseBinary;

/// Immutable interaction dataset. Ids are dense and 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    num_groups: usize,
    user_item: SparseBinary,
    group_item: SparseBinary,
    membership: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Validates and builds a dataset. Member lists are sorted and deduplicated.
    pub fn new(
        user_item: SparseBinary,
        group_item: SparseBinary,
        mut membership: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let num_users = user_item.rows();
        let num_items = user_item.cols();
        let num_groups = group_item.rows();
        if group_item.cols() != num_items {
            return Err(Error::Validation(format!(
                "user-item matrix has {num_items} items but group-item matrix has {}",
                group_item.cols()
            )));
        }
        if membership.len() != num_groups {
            return Err(Error::Validation(format!(
                "membership lists {} groups, group-item matrix has {num_groups}",
                membership.len()
            )));
        }
        for (g, members) in membership.iter_mut().enumerate() {
            members.sort_unstable();
            members.dedup();
            if members.is_empty() {
                return Err(Error::Validation(format!("group {g} has no members")));
            }
            if let Some(&u) = members.iter().find(|&&u| u >= num_users) {
                return Err(Error::Validation(format!(
                    "group {g} references unknown user {u} (num_users = {num_users})"
                )));
            }
        }
        Ok(Self {
            num_users,
            num_items,
            num_groups,
            user_item,
            group_item,
            membership,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// R, `|U| x |I|`.
    pub fn user_item(&self) -> &SparseBinary {
        &self.user_item
    }

    /// S, `|G| x |I|`.
    pub fn group_item(&self) -> &SparseBinary {
        &self.group_item
    }

    /// Sorted member lists indexed by group id.
    pub fn membership(&self) -> &[Vec<usize>] {
        &self.membership
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.membership[group]
    }

    /// Same users, items and membership with a different group-item matrix.
    pub fn with_group_item(&self, group_item: SparseBinary) -> Result<Self> {
        Self::new(
            self.user_item.clone(),
            group_item,
            self.membership.clone(),
        )
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            users: self.num_users,
            items: self.num_items,
            groups: self.num_groups,
            user_item_feedback: self.user_item.nnz(),
            group_item_feedback: self.group_item.nnz(),
            memberships: self.membership.iter().map(Vec::len).sum(),
        }
    }
}

/// Dataset statistics in the usual `#User #Item #Group #U-I #G-I` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub groups: usize,
    pub user_item_feedback: usize,
    pub group_item_feedback: usize,
    pub memberships: usize,
}

impl DatasetStats {
    /// Aligned text table with one row labelled `name`.
    pub fn table(&self, name: &str) -> String {
        format!(
            "{:<12} {:>8} {:>8} {:>8} {:>14} {:>14}\n{:<12} {:>8} {:>8} {:>8} {:>14} {:>14}\n",
            "Dataset",
            "#User",
            "#Item",
            "#Group",
            "#U-I Feedback",
            "#G-I Feedback",
            name,
            self.users,
            self.items,
            self.groups,
            self.user_item_feedback,
            self.group_item_feedback,
        )
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table("dataset"))
    }
}
