use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_INIT};

/// Shape of a model: table sizes, embedding width and tower depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub users: usize,
    pub items: usize,
    pub groups: usize,
    pub dim: usize,
    pub user_layers: usize,
    pub group_layers: usize,
}

/// One parameter tensor of [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    UserEmbed,
    ItemEmbed,
    /// User-level layer weights on the unperturbed hypergraph.
    Theta(usize),
    /// Coarse-dropout branch weights.
    Gamma(usize),
    /// Fine-dropout branch weights.
    Phi(usize),
    /// Group-level (motif) layer weights.
    Psi(usize),
    AttnWeight,
    AttnQuery,
    Discriminator,
}

impl TensorKind {
    pub fn name(&self) -> String {
        match self {
            TensorKind::UserEmbed => "user_embed".into(),
            TensorKind::ItemEmbed => "item_embed".into(),
            TensorKind::Theta(l) => format!("theta[{l}]"),
            TensorKind::Gamma(l) => format!("gamma[{l}]"),
            TensorKind::Phi(l) => format!("phi[{l}]"),
            TensorKind::Psi(l) => format!("psi[{l}]"),
            TensorKind::AttnWeight => "attn_weight".into(),
            TensorKind::AttnQuery => "attn_query".into(),
            TensorKind::Discriminator => "discriminator".into(),
        }
    }

    /// Parameters of the group side (attention pooling and motif layers),
    /// trained at the group-stage learning rate.
    pub fn is_group_level(&self) -> bool {
        matches!(
            self,
            TensorKind::Psi(_) | TensorKind::AttnWeight | TensorKind::AttnQuery
        )
    }

    /// Stable key so every tensor draws its own init stream regardless of
    /// how many layers precede it.
    fn init_key(&self) -> u64 {
        let (code, layer) = match *self {
            TensorKind::UserEmbed => (1, 0),
            TensorKind::ItemEmbed => (2, 0),
            TensorKind::Theta(l) => (3, l),
            TensorKind::Gamma(l) => (4, l),
            TensorKind::Phi(l) => (5, l),
            TensorKind::Psi(l) => (6, l),
            TensorKind::AttnWeight => (7, 0),
            TensorKind::AttnQuery => (8, 0),
            TensorKind::Discriminator => (9, 0),
        };
        (code << 32) | layer as u64
    }
}

/// All trainable tensors. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub user_embed: Array2<f64>,
    pub item_embed: Array2<f64>,
    pub theta: Vec<Array2<f64>>,
    pub gamma: Vec<Array2<f64>>,
    pub phi: Vec<Array2<f64>>,
    pub psi: Vec<Array2<f64>>,
    /// `d x d`
    pub attn_weight: Array2<f64>,
    /// `d x 1`
    pub attn_query: Array2<f64>,
    /// `d x d`
    pub discriminator: Array2<f64>,
}

impl ModelParams {
    /// Fixed tensor order used by the optimizer and the checkpoint format.
    pub fn layout(dims: &ModelDims) -> Vec<TensorKind> {
        let mut out = vec![TensorKind::UserEmbed, TensorKind::ItemEmbed];
        out.extend((0..dims.user_layers).map(TensorKind::Theta));
        out.extend((0..dims.user_layers).map(TensorKind::Gamma));
        out.extend((0..dims.user_layers).map(TensorKind::Phi));
        out.extend((0..dims.group_layers).map(TensorKind::Psi));
        out.extend([
            TensorKind::AttnWeight,
            TensorKind::AttnQuery,
            TensorKind::Discriminator,
        ]);
        out
    }

    pub fn shape_of(dims: &ModelDims, kind: TensorKind) -> (usize, usize) {
        let d = dims.dim;
        match kind {
            TensorKind::UserEmbed => (dims.users, d),
            TensorKind::ItemEmbed => (dims.items, d),
            TensorKind::AttnQuery => (d, 1),
            _ => (d, d),
        }
    }

    /// Every entry uniform in `(-1/√d, 1/√d)`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let bound = 1.0 / (dims.dim as f64).sqrt();
        Self::init_uniform(dims, seed, bound)
    }

    /// Uniform in `(-bound, bound)`; each tensor uses its own seeded stream.
    pub fn init_uniform(dims: ModelDims, seed: u64, bound: f64) -> Result<Self> {
        if dims.dim == 0 || dims.users == 0 || dims.items == 0 || dims.groups == 0 {
            return Err(Error::Parameter(format!("degenerate model dims {dims:?}")));
        }
        let draw = |kind: TensorKind| {
            let mut rng = stream_rng(seed, STREAM_INIT, kind.init_key());
            let (r, c) = Self::shape_of(&dims, kind);
            Array2::from_shape_simple_fn((r, c), || rng.gen_range(-bound..bound))
        };
        Ok(Self {
            dims,
            user_embed: draw(TensorKind::UserEmbed),
            item_embed: draw(TensorKind::ItemEmbed),
            theta: (0..dims.user_layers).map(|l| draw(TensorKind::Theta(l))).collect(),
            gamma: (0..dims.user_layers).map(|l| draw(TensorKind::Gamma(l))).collect(),
            phi: (0..dims.user_layers).map(|l| draw(TensorKind::Phi(l))).collect(),
            psi: (0..dims.group_layers).map(|l| draw(TensorKind::Psi(l))).collect(),
            attn_weight: draw(TensorKind::AttnWeight),
            attn_query: draw(TensorKind::AttnQuery),
            discriminator: draw(TensorKind::Discriminator),
        })
    }

    pub fn tensor(&self, kind: TensorKind) -> &Array2<f64> {
        match kind {
            TensorKind::UserEmbed => &self.user_embed,
            TensorKind::ItemEmbed => &self.item_embed,
            TensorKind::Theta(l) => &self.theta[l],
            TensorKind::Gamma(l) => &self.gamma[l],
            TensorKind::Phi(l) => &self.phi[l],
            TensorKind::Psi(l) => &self.psi[l],
            TensorKind::AttnWeight => &self.attn_weight,
            TensorKind::AttnQuery => &self.attn_query,
            TensorKind::Discriminator => &self.discriminator,
        }
    }

    pub fn tensor_mut(&mut self, kind: TensorKind) -> &mut Array2<f64> {
        match kind {
            TensorKind::UserEmbed => &mut self.user_embed,
            TensorKind::ItemEmbed => &mut self.item_embed,
            TensorKind::Theta(l) => &mut self.theta[l],
            TensorKind::Gamma(l) => &mut self.gamma[l],
            TensorKind::Phi(l) => &mut self.phi[l],
            TensorKind::Psi(l) => &mut self.psi[l],
            TensorKind::AttnWeight => &mut self.attn_weight,
            TensorKind::AttnQuery => &mut self.attn_query,
            TensorKind::Discriminator => &mut self.discriminator,
        }
    }

    pub fn is_finite(&self) -> bool {
        Self::layout(&self.dims)
            .into_iter()
            .all(|k| self.tensor(k).iter().all(|x| x.is_finite()))
    }

    /// Shape check of every tensor against `dims`.
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims;
        let counts = [self.theta.len(), self.gamma.len(), self.phi.len()];
        if counts.iter().any(|&c| c != dims.user_layers) || self.psi.len() != dims.group_layers {
            return Err(Error::Contract("layer counts disagree with dims".into()));
        }
        for kind in Self::layout(&dims) {
            let want = Self::shape_of(&dims, kind);
            let got = self.tensor(kind).dim();
            if got != want {
                return Err(Error::Contract(format!(
                    "{} has shape {got:?}, expected {want:?}",
                    kind.name()
                )));
            }
        }
        Ok(())
    }
}
