//! Parameters, graph structure and forward passes of the hierarchical
//! hypergraph recommender.

mod checkpoint;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::augment::{coarse_drop, fine_drop, DropoutMask};
use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::hypergraph::{
    build_user_level, group_propagation_operator, motif_adjacency, project_groups, propagation_operator,
    IncidenceMatrix, MotifAdjacency,
};
use crate::sparse::CsrMatrix;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointMeta, CHECKPOINT_VERSION};
pub use forward::{
    attention_aggregate, group_conv_layer, score_group_item, score_user_item, user_conv_layer, ForwardState,
    Heads, ParamVars, TapeForward,
};
pub use params::{ModelDims, ModelParams, TensorKind};

/// Model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Hierarchical hypergraph model without self-supervision.
    #[serde(rename = "HHGR")]
    Hhgr,
    /// Coarse and fine dropout towers with the contrastive objective.
    #[serde(rename = "S2")]
    S2,
    /// No user-level convolution; groups start from their interactions.
    #[serde(rename = "HHGR-wu")]
    HhgrWu,
    /// No group-level convolution; groups are the attention output.
    #[serde(rename = "HHGR-wg")]
    HhgrWg,
    /// Fine dropout only, contrasted with the unperturbed tower.
    #[serde(rename = "HHGR-F")]
    HhgrF,
    /// Coarse dropout only, contrasted with the unperturbed tower.
    #[serde(rename = "HHGR-C")]
    HhgrC,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Hhgr, Mode::S2, Mode::HhgrWu, Mode::HhgrWg, Mode::HhgrF, Mode::HhgrC];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Hhgr => "HHGR",
            Mode::S2 => "S2",
            Mode::HhgrWu => "HHGR-wu",
            Mode::HhgrWg => "HHGR-wg",
            Mode::HhgrF => "HHGR-F",
            Mode::HhgrC => "HHGR-C",
        }
    }

    /// Whether the contrastive loss and dropout views are used.
    pub fn is_self_supervised(self) -> bool {
        matches!(self, Mode::S2 | Mode::HhgrF | Mode::HhgrC)
    }

    pub fn uses_coarse(self) -> bool {
        matches!(self, Mode::S2 | Mode::HhgrC)
    }

    pub fn uses_fine(self) -> bool {
        matches!(self, Mode::S2 | Mode::HhgrF)
    }

    /// Whether the unperturbed Θ tower contributes to user representations.
    pub fn uses_raw_tower(self) -> bool {
        matches!(self, Mode::Hhgr | Mode::HhgrWg | Mode::HhgrF | Mode::HhgrC)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("S2-HHGR") && *m == Mode::S2))
            .ok_or_else(|| {
                let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown mode `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Flattened group membership: members of group `g` are
/// `members[offsets[g]..offsets[g + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    pub members: Arc<[usize]>,
    pub offsets: Arc<[usize]>,
}

impl GroupIndex {
    pub fn from_lists(membership: &[Vec<usize>]) -> Result<Self> {
        let mut members = Vec::new();
        let mut offsets = vec![0];
        for (g, m) in membership.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::Contract(format!("group {g} has no members")));
            }
            members.extend_from_slice(m);
            offsets.push(members.len());
        }
        Ok(Self {
            members: members.into(),
            offsets: offsets.into(),
        })
    }

    pub fn num_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.members[self.offsets[g]..self.offsets[g + 1]]
    }
}

/// Fixed graph operators derived from one dataset.
#[derive(Debug, Clone)]
pub struct Structure {
    pub incidence: IncidenceMatrix,
    pub user_op: Arc<CsrMatrix>,
    pub motif: MotifAdjacency,
    pub group_op: Arc<CsrMatrix>,
    pub groups: GroupIndex,
    /// Row-normalized group-item matrix, used to seed groups when the
    /// user-level tower is ablated.
    pub group_init: Arc<CsrMatrix>,
}

impl Structure {
    /// Builds operators from the full membership and the (training)
    /// group-item matrix of `ds`.
    pub fn from_dataset(ds: &InteractionDataset) -> Result<Self> {
        let incidence = build_user_level(ds.membership(), ds.num_users())?;
        let user_op = Arc::new(propagation_operator(&incidence).into_matrix());
        let motif = motif_adjacency(&project_groups(&incidence));
        let group_op = Arc::new(group_propagation_operator(&motif));
        Ok(Self {
            incidence,
            user_op,
            motif,
            group_op,
            groups: GroupIndex::from_lists(ds.membership())?,
            group_init: Arc::new(ds.group_item().row_normalized()),
        })
    }

    /// Same structure with the group-level operator replaced.
    pub fn with_group_op(mut self, group_op: CsrMatrix) -> Result<Self> {
        let n = self.groups.num_groups();
        if group_op.rows() != n || group_op.cols() != n {
            return Err(Error::Contract(format!(
                "group operator is {}x{}, expected {n}x{n}",
                group_op.rows(),
                group_op.cols()
            )));
        }
        self.group_op = Arc::new(group_op);
        Ok(self)
    }

    pub fn num_users(&self) -> usize {
        self.incidence.num_vertices()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.num_groups()
    }
}

/// Propagation operators of the two perturbed hypergraphs.
#[derive(Debug, Clone)]
pub struct Views {
    pub coarse: Arc<CsrMatrix>,
    pub fine: Arc<CsrMatrix>,
}

impl Views {
    /// Unperturbed views, used at inference.
    pub fn full(s: &Structure) -> Self {
        Self {
            coarse: s.user_op.clone(),
            fine: s.user_op.clone(),
        }
    }

    /// Fresh coarse and fine dropout views of `s.incidence`.
    pub fn draw(s: &Structure, coarse_rate: f64, fine_rate: f64, seed: u64) -> Result<(Self, [DropoutMask; 2])> {
        let (hc, mc) = coarse_drop(&s.incidence, coarse_rate, seed)?;
        let (hf, mf) = fine_drop(&s.incidence, fine_rate, seed)?;
        Ok((
            Self {
                coarse: Arc::new(propagation_operator(&hc).into_matrix()),
                fine: Arc::new(propagation_operator(&hf).into_matrix()),
            },
            [mc, mf],
        ))
    }
}
