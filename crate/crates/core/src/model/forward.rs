use std::sync::Arc;

use ndarray::{Array2, ArrayView1};

use super::{GroupIndex, Mode, ModelParams, Structure, TensorKind, Views};
use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

fn conv(a: &CsrMatrix, p: &Array2<f64>, w: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
    if a.cols() != p.nrows() || p.ncols() != w.nrows() {
        return Err(Error::Contract(format!(
            "{what}: operator {}x{}, input {:?}, weights {:?}",
            a.rows(),
            a.cols(),
            p.dim(),
            w.dim()
        )));
    }
    Ok(a.matmul_dense(p).dot(w))
}

/// One linear user-level layer: `A · P · Θ`.
pub fn user_conv_layer(a: &CsrMatrix, p: &Array2<f64>, theta: &Array2<f64>) -> Result<Array2<f64>> {
    conv(a, p, theta, "user layer")
}

/// One linear group-level layer: `A_g · Z · Ψ`.
pub fn group_conv_layer(a_g: &CsrMatrix, z: &Array2<f64>, psi: &Array2<f64>) -> Result<Array2<f64>> {
    conv(a_g, z, psi, "group layer")
}

/// Attention pooling of member representations. Returns the pooled group
/// matrix and the weights, flattened in `groups.members` order.
pub fn attention_aggregate(
    p: &Array2<f64>,
    groups: &GroupIndex,
    w_agg: &Array2<f64>,
    x: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let d = p.ncols();
    if w_agg.dim() != (d, d) || x.dim() != (d, 1) {
        return Err(Error::Contract(format!(
            "attention weights {:?} and query {:?} do not fit width {d}",
            w_agg.dim(),
            x.dim()
        )));
    }
    if let Some(&u) = groups.members.iter().find(|&&u| u >= p.nrows()) {
        return Err(Error::Contract(format!("member {u} out of {} users", p.nrows())));
    }
    let query = w_agg.dot(x);
    let mut out = Array2::zeros((groups.num_groups(), d));
    let mut alpha = vec![0.0; groups.members.len()];
    for g in 0..groups.num_groups() {
        let (lo, hi) = (groups.offsets[g], groups.offsets[g + 1]);
        let logits: Vec<f64> = groups.members[lo..hi].iter().map(|&u| p.row(u).dot(&query.column(0))).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut row = out.row_mut(g);
        for (k, (&u, e)) in groups.members[lo..hi].iter().zip(&exps).enumerate() {
            alpha[lo + k] = e / z;
            row.scaled_add(e / z, &p.row(u));
        }
    }
    Ok((out, alpha))
}

pub fn score_user_item(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    sigmoid(p.dot(&q))
}

pub fn score_group_item(z: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    sigmoid(z.dot(&q))
}

fn tower(a: &CsrMatrix, p0: &Array2<f64>, weights: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    let mut layers = vec![p0.clone()];
    for w in weights {
        let next = user_conv_layer(a, layers.last().expect("nonempty"), w)?;
        layers.push(next);
    }
    Ok(layers)
}

fn need_views(mode: Mode, views: Option<&Views>) -> Result<Option<&Views>> {
    if mode.is_self_supervised() && views.is_none() {
        return Err(Error::Contract(format!("mode {mode} needs dropout views")));
    }
    Ok(views)
}

/// All intermediate representations of one inference pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    /// Unperturbed tower `P^(0..L_u)`; empty when the mode does not use it.
    pub raw_layers: Vec<Array2<f64>>,
    /// Final coarse-branch representations `P′`.
    pub coarse: Option<Array2<f64>>,
    /// Final fine-branch representations `P″`.
    pub fine: Option<Array2<f64>>,
    /// User representations used for scoring.
    pub users: Array2<f64>,
    /// Attention weights in member order; empty when pooling is skipped.
    pub attention: Vec<f64>,
    /// Group input to the motif layers (`Z̃`, or interaction-seeded).
    pub pooled: Array2<f64>,
    /// `Z^(0..L_g)`; only `Z^(0)` when the motif layers are disabled.
    pub group_layers: Vec<Array2<f64>>,
    /// Group representations used for scoring.
    pub groups: Array2<f64>,
}

impl ForwardState {
    pub fn compute(params: &ModelParams, s: &Structure, views: Option<&Views>, mode: Mode) -> Result<Self> {
        let views = need_views(mode, views)?;
        params.validate()?;
        let p0 = &params.user_embed;
        let raw_layers = if mode.uses_raw_tower() {
            tower(&s.user_op, p0, &params.theta)?
        } else {
            Vec::new()
        };
        let branch = |op: &CsrMatrix, w: &[Array2<f64>]| -> Result<Array2<f64>> {
            Ok(tower(op, p0, w)?.pop().expect("nonempty"))
        };
        let coarse = match views {
            Some(v) if mode.uses_coarse() => Some(branch(&v.coarse, &params.gamma)?),
            _ => None,
        };
        let fine = match views {
            Some(v) if mode.uses_fine() => Some(branch(&v.fine, &params.phi)?),
            _ => None,
        };
        let raw = raw_layers.last();
        let users = match mode {
            Mode::HhgrWu => p0.clone(),
            Mode::Hhgr | Mode::HhgrWg => raw.expect("raw tower").clone(),
            _ => {
                let parts: Vec<&Array2<f64>> = [raw, coarse.as_ref(), fine.as_ref()].into_iter().flatten().collect();
                parts[0] + parts[1]
            }
        };

        let (pooled, attention) = if mode == Mode::HhgrWu {
            (s.group_init.matmul_dense(&params.item_embed), Vec::new())
        } else {
            attention_aggregate(&users, &s.groups, &params.attn_weight, &params.attn_query)?
        };
        let mut group_layers = vec![pooled.clone()];
        if mode != Mode::HhgrWg {
            for psi in &params.psi {
                let next = group_conv_layer(&s.group_op, group_layers.last().expect("nonempty"), psi)?;
                group_layers.push(next);
            }
        }
        let groups = if group_layers.len() > 1 {
            group_layers.last().expect("nonempty") + &pooled
        } else {
            pooled.clone()
        };
        Ok(Self {
            raw_layers,
            coarse,
            fine,
            users,
            attention,
            pooled,
            group_layers,
            groups,
        })
    }

    /// Score of every item for group `g`, as raw dot products.
    pub fn group_logits(&self, item_embed: &Array2<f64>, g: usize) -> Vec<f64> {
        item_embed.dot(&self.groups.row(g)).to_vec()
    }

    /// `(P′, P″)` as fed to the discriminator, for self-supervised modes.
    pub fn contrast_pair(&self, mode: Mode) -> Option<(&Array2<f64>, &Array2<f64>)> {
        let raw = self.raw_layers.last();
        match mode {
            Mode::S2 => Some((self.coarse.as_ref()?, self.fine.as_ref()?)),
            Mode::HhgrC => Some((self.coarse.as_ref()?, raw?)),
            Mode::HhgrF => Some((raw?, self.fine.as_ref()?)),
            _ => None,
        }
    }
}

/// Tape leaves for every parameter tensor, in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    entries: Vec<(TensorKind, Var)>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let entries = ModelParams::layout(&params.dims)
            .into_iter()
            .map(|k| (k, tape.leaf(params.tensor(k).clone(), k.name())))
            .collect();
        Self { entries }
    }

    pub fn get(&self, kind: TensorKind) -> Var {
        self.entries
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("tensor {} not registered", kind.name()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorKind, Var)> + '_ {
        self.entries.iter().copied()
    }
}

/// Which outputs a tape forward pass should build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub scores: bool,
    pub contrast: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TapeForward {
    pub items: Var,
    pub users: Option<Var>,
    pub groups: Option<Var>,
    pub contrast: Option<(Var, Var)>,
}

fn tape_tower(tape: &mut Tape, op: &Arc<CsrMatrix>, p0: Var, weights: impl Iterator<Item = Var>) -> Result<Var> {
    let mut p = p0;
    for w in weights {
        let h = tape.spmm(op.clone(), p)?;
        p = tape.matmul(h, w)?;
    }
    Ok(p)
}

impl TapeForward {
    /// Records the forward computation of `mode` on `tape`.
    pub fn build(
        tape: &mut Tape,
        vars: &ParamVars,
        params: &ModelParams,
        s: &Structure,
        views: Option<&Views>,
        mode: Mode,
        heads: Heads,
    ) -> Result<Self> {
        let views = need_views(mode, views)?;
        if heads.contrast && !mode.is_self_supervised() {
            return Err(Error::Contract(format!("mode {mode} has no contrastive pair")));
        }
        let dims = params.dims;
        let p0 = vars.get(TensorKind::UserEmbed);
        let items = vars.get(TensorKind::ItemEmbed);

        let need_raw = mode.uses_raw_tower() && (heads.scores || matches!(mode, Mode::HhgrF | Mode::HhgrC));
        let raw = if need_raw {
            Some(tape_tower(tape, &s.user_op, p0, (0..dims.user_layers).map(|l| vars.get(TensorKind::Theta(l))))?)
        } else {
            None
        };
        let coarse = match views {
            Some(v) if mode.uses_coarse() => Some(tape_tower(
                tape,
                &v.coarse,
                p0,
                (0..dims.user_layers).map(|l| vars.get(TensorKind::Gamma(l))),
            )?),
            _ => None,
        };
        let fine = match views {
            Some(v) if mode.uses_fine() => Some(tape_tower(
                tape,
                &v.fine,
                p0,
                (0..dims.user_layers).map(|l| vars.get(TensorKind::Phi(l))),
            )?),
            _ => None,
        };
        let contrast = if heads.contrast {
            match mode {
                Mode::S2 => coarse.zip(fine),
                Mode::HhgrC => coarse.zip(raw),
                Mode::HhgrF => raw.zip(fine),
                _ => None,
            }
        } else {
            None
        };

        let (mut users, mut groups) = (None, None);
        if heads.scores {
            let p = match mode {
                Mode::HhgrWu => p0,
                Mode::Hhgr | Mode::HhgrWg => raw.expect("raw tower"),
                _ => {
                    let parts: Vec<Var> = [raw, coarse, fine].into_iter().flatten().collect();
                    tape.add(parts[0], parts[1])?
                }
            };
            let pooled = if mode == Mode::HhgrWu {
                tape.spmm(s.group_init.clone(), items)?
            } else {
                let query = tape.matmul(vars.get(TensorKind::AttnWeight), vars.get(TensorKind::AttnQuery))?;
                let pm = tape.gather_rows(p, s.groups.members.clone())?;
                let logits = tape.matmul(pm, query)?;
                let alpha = tape.segment_softmax(logits, s.groups.offsets.clone())?;
                tape.segment_weighted_sum(pm, alpha, s.groups.offsets.clone())?
            };
            let z = if mode != Mode::HhgrWg && dims.group_layers > 0 {
                let zl = tape_tower(
                    tape,
                    &s.group_op,
                    pooled,
                    (0..dims.group_layers).map(|l| vars.get(TensorKind::Psi(l))),
                )?;
                tape.add(zl, pooled)?
            } else {
                pooled
            };
            users = Some(p);
            groups = Some(z);
        }
        Ok(Self {
            items,
            users,
            groups,
            contrast,
        })
    }
}
