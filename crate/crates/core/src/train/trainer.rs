use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{sample_contrast_negatives, tape_contrastive, tape_pairwise, LossBreakdown};
use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::data::{SplitDataset, SubjectKind, TrainingTriple, TripleSampler};
use crate::error::{Error, Result};
use crate::eval::{evaluate_state, MetricValues};
use crate::model::{ForwardState, Heads, Mode, ModelParams, ParamVars, Structure, TapeForward, TensorKind, Views};
use crate::rng::{derive_seed, stream_rng, STREAM_BATCH, STREAM_CONTRAST, STREAM_COARSE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Contrastive loss only.
    Pretrain,
    /// Full weighted objective.
    Joint,
}

/// Users whose two views are contrasted, with their sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastBatch {
    pub users: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batch {
    pub ui: Vec<TrainingTriple>,
    pub gi: Vec<TrainingTriple>,
    pub contrast: Option<ContrastBatch>,
}

/// Loss of one batch and, if requested, the gradient of its total with
/// respect to every tensor the loss depends on.
pub fn objective(
    params: &ModelParams,
    s: &Structure,
    views: Option<&Views>,
    mode: Mode,
    beta: f64,
    stage: Stage,
    batch: &Batch,
    with_grads: bool,
) -> Result<(LossBreakdown, Vec<(TensorKind, Array2<f64>)>)> {
    let contrast_needed = match stage {
        Stage::Pretrain => {
            if !mode.is_self_supervised() {
                return Err(Error::Contract(format!("mode {mode} has no pretraining stage")));
            }
            true
        }
        Stage::Joint => mode.is_self_supervised() && beta > 0.0,
    };
    let contrast = match (&batch.contrast, contrast_needed) {
        (Some(c), true) => Some(c),
        (None, true) => return Err(Error::Contract("contrastive batch missing".into())),
        _ => None,
    };
    let beta = match stage {
        Stage::Pretrain => 1.0,
        Stage::Joint if mode.is_self_supervised() => beta,
        Stage::Joint => 0.0,
    };
    let heads = Heads {
        scores: stage == Stage::Joint,
        contrast: contrast.is_some(),
    };

    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let fwd = TapeForward::build(&mut tape, &vars, params, s, views, mode, heads)?;

    let uu = match (contrast, fwd.contrast) {
        (Some(c), Some((a, b))) => Some(tape_contrastive(
            &mut tape,
            a,
            b,
            vars.get(TensorKind::Discriminator),
            &c.users,
            &c.negatives,
        )?),
        _ => None,
    };
    let (ui, gi) = if stage == Stage::Joint {
        let users = fwd.users.expect("scores requested");
        let groups = fwd.groups.expect("scores requested");
        (
            tape_pairwise(&mut tape, users, fwd.items, &batch.ui)?,
            tape_pairwise(&mut tape, groups, fwd.items, &batch.gi)?,
        )
    } else {
        (None, None)
    };

    let mut total = uu.map(|v| if stage == Stage::Joint { tape.scale(v, beta) } else { v });
    for term in [ui, gi].into_iter().flatten() {
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let value = |v: Option<crate::autograd::Var>, t: &Tape| v.map_or(0.0, |v| t.scalar(v));
    let loss = LossBreakdown {
        l_ui: value(ui, &tape),
        l_gi: value(gi, &tape),
        l_uu: value(uu, &tape),
        total: value(total, &tape),
        beta,
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut grads = Vec::new();
    if let (true, Some(t)) = (with_grads, total) {
        let mut g = tape.backward(t)?;
        for (kind, var) in vars.iter() {
            if let Some(x) = g.take(var) {
                grads.push((kind, x));
            }
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: usize,
    pub l_ui: f64,
    pub l_gi: f64,
    pub l_uu: f64,
    pub total: f64,
    pub beta: f64,
    pub steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<BTreeMap<usize, MetricValues>>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainingLog,
    /// Reason training stopped early on a non-finite value; `params` then
    /// holds the last finite state.
    pub diverged: Option<String>,
    /// Joint epoch whose parameters were kept by early stopping.
    pub best_epoch: Option<usize>,
}

fn split_even(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let (base, extra) = (n / parts, n % parts);
    let mut out = Vec::with_capacity(parts);
    let mut lo = 0;
    for k in 0..parts {
        let hi = lo + base + usize::from(k < extra);
        out.push(lo..hi);
        lo = hi;
    }
    out
}

/// Shuffled users cut into at most `wanted` chunks, each big enough to
/// supply `n_neg` distinct negatives.
fn contrast_chunks(users: usize, wanted: usize, n_neg: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if users <= n_neg {
        return Err(Error::Sampling(format!(
            "{users} users cannot supply {n_neg} distinct contrastive negatives"
        )));
    }
    let k = wanted.min(users / (n_neg + 1)).max(1);
    let mut perm: Vec<usize> = (0..users).collect();
    perm.shuffle(&mut stream_rng(seed, STREAM_BATCH, epoch));
    Ok(split_even(users, k).into_iter().map(|r| perm[r].to_vec()).collect())
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

struct Run<'a> {
    cfg: &'a RunConfig,
    split: &'a SplitDataset,
    structure: Structure,
    params: ModelParams,
    adam: Adam,
    log: TrainingLog,
    global_epoch: u64,
}

impl Run<'_> {
    fn draw_views(&self) -> Result<Option<Views>> {
        if !self.cfg.model.mode.is_self_supervised() {
            return Ok(None);
        }
        let seed = derive_seed(self.cfg.train.seed, STREAM_COARSE, self.global_epoch);
        let (views, _) = Views::draw(&self.structure, self.cfg.ssl.coarse_rate, self.cfg.ssl.fine_rate, seed)?;
        Ok(Some(views))
    }

    /// Runs one batch and applies the update. Parameters are untouched if
    /// a non-finite value appears.
    fn step(&mut self, stage: Stage, epoch: usize, views: Option<&Views>, batch: &Batch) -> Result<LossBreakdown> {
        let (loss, grads) = objective(
            &self.params,
            &self.structure,
            views,
            self.cfg.model.mode,
            self.cfg.ssl.beta,
            stage,
            batch,
            true,
        )?;
        let (lr_user, lr_group) = (self.cfg.train.lr_user, self.cfg.train.lr_group);
        let lr = |k: TensorKind| match stage {
            Stage::Pretrain => lr_user,
            Stage::Joint if k.is_group_level() => lr_group,
            Stage::Joint => lr_user,
        };
        let before = self.params.clone();
        self.adam.step(&mut self.params, &grads, lr)?;
        if !self.params.is_finite() {
            self.params = before;
            return Err(Error::NonFinite("parameters after update".into()));
        }
        self.log.steps.push(StepRecord {
            stage,
            epoch,
            step: self.log.steps.len(),
            loss,
        });
        Ok(loss)
    }

    fn pretrain_epoch(&mut self, epoch: usize) -> Result<LossBreakdown> {
        let views = self.draw_views()?;
        let t = &self.cfg.train;
        let users = self.structure.num_users();
        let wanted = users.div_ceil(t.batch_size);
        let chunks = contrast_chunks(users, wanted, t.n_neg, t.seed, self.global_epoch)?;
        let mut rng = stream_rng(t.seed, STREAM_CONTRAST, self.global_epoch);
        let mut sum = LossBreakdown { beta: 1.0, ..Default::default() };
        for users in chunks {
            let negatives = sample_contrast_negatives(&users, t.n_neg, &mut rng)?;
            let batch = Batch {
                contrast: Some(ContrastBatch { users, negatives }),
                ..Default::default()
            };
            sum.accumulate(&self.step(Stage::Pretrain, epoch, views.as_ref(), &batch)?);
        }
        Ok(sum)
    }

    fn joint_epoch(&mut self, epoch: usize, ui: &TripleSampler, gi: &TripleSampler) -> Result<LossBreakdown> {
        let mode = self.cfg.model.mode;
        let t = self.cfg.train.clone();
        let ui = ui.epoch(self.global_epoch as usize);
        let gi = gi.epoch(self.global_epoch as usize);
        let nb = ui.len().div_ceil(t.batch_size).max(gi.len().div_ceil(t.batch_size)).max(1);
        let (ui_chunks, gi_chunks) = (split_even(ui.len(), nb), split_even(gi.len(), nb));
        let contrastive = mode.is_self_supervised() && self.cfg.ssl.beta > 0.0;
        let views = self.draw_views()?;
        let user_chunks = if contrastive {
            contrast_chunks(self.structure.num_users(), nb, t.n_neg, t.seed, self.global_epoch)?
        } else {
            Vec::new()
        };
        let mut rng = stream_rng(t.seed, STREAM_CONTRAST, self.global_epoch);
        let mut sum = LossBreakdown::default();
        for b in 0..nb {
            let contrast = if contrastive {
                let users = user_chunks[b % user_chunks.len()].clone();
                let negatives = sample_contrast_negatives(&users, t.n_neg, &mut rng)?;
                Some(ContrastBatch { users, negatives })
            } else {
                None
            };
            let batch = Batch {
                ui: ui[ui_chunks[b].clone()].to_vec(),
                gi: gi[gi_chunks[b].clone()].to_vec(),
                contrast,
            };
            sum.accumulate(&self.step(Stage::Joint, epoch, views.as_ref(), &batch)?);
        }
        Ok(sum)
    }

    fn validate(&self) -> Result<Option<BTreeMap<usize, MetricValues>>> {
        if self.split.validation.is_empty() {
            return Ok(None);
        }
        let views = Views::full(&self.structure);
        let state = ForwardState::compute(&self.params, &self.structure, Some(&views), self.cfg.model.mode)?;
        let report = evaluate_state(
            &state,
            &self.params.item_embed,
            self.split.train.group_item(),
            &self.split.validation,
            &self.cfg.eval,
        )?;
        Ok(Some(report.metrics))
    }
}

fn record(stage: Stage, epoch: usize, loss: LossBreakdown, steps: usize, validation: Option<BTreeMap<usize, MetricValues>>, start: Instant) -> EpochRecord {
    EpochRecord {
        stage,
        epoch,
        l_ui: loss.l_ui,
        l_gi: loss.l_gi,
        l_uu: loss.l_uu,
        total: loss.total,
        beta: loss.beta,
        steps,
        validation,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Cutoff used for early stopping: 20 when evaluated, else the smallest.
fn stopping_k(ks: &[usize]) -> usize {
    if ks.contains(&20) {
        20
    } else {
        ks.iter().copied().min().unwrap_or(20)
    }
}

/// [`train_with`] without a per-epoch callback.
pub fn train(split: &SplitDataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(split, cfg, |_| Ok(()))
}

/// Two-stage training: contrastive pretraining (self-supervised modes only),
/// then the joint objective with validation-based early stopping.
/// `on_epoch` sees every epoch record as soon as it is complete.
pub fn train_with(
    split: &SplitDataset,
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode = cfg.model.mode;
    let dims = cfg.dims(&split.train);
    let structure = Structure::from_dataset(&split.train)?;
    if structure.motif.is_zero() && dims.group_layers > 0 && mode != Mode::HhgrWg {
        warn!("train: no closed triangles among groups, the motif layers contribute nothing");
    }
    let ui_sampler = TripleSampler::new(split.train.user_item(), SubjectKind::User, cfg.train.n_neg, cfg.train.seed)?;
    let gi_sampler = TripleSampler::new(split.train.group_item(), SubjectKind::Group, cfg.train.n_neg, cfg.train.seed)?;
    let mut run = Run {
        cfg,
        split,
        structure,
        params: ModelParams::init(dims, cfg.train.seed)?,
        adam: Adam::default(),
        log: TrainingLog::default(),
        global_epoch: 0,
    };
    let start = Instant::now();
    let mut diverged = None;

    if mode.is_self_supervised() {
        for epoch in 1..=cfg.train.epochs_pretrain {
            let steps_before = run.log.steps.len();
            match run.pretrain_epoch(epoch) {
                Ok(loss) => {
                    let rec = record(Stage::Pretrain, epoch, loss, run.log.steps.len() - steps_before, None, start);
                    info!("pretrain epoch {epoch}: l_uu = {:.6}", rec.l_uu);
                    on_epoch(&rec)?;
                    run.log.epochs.push(rec);
                }
                Err(e) if is_divergence(&e) => {
                    diverged = Some(format!("pretrain epoch {epoch}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            }
            run.global_epoch += 1;
        }
    }

    let k_stop = stopping_k(&cfg.eval.ks);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    if diverged.is_none() {
        for epoch in 1..=cfg.train.epochs {
            let steps_before = run.log.steps.len();
            let loss = match run.joint_epoch(epoch, &ui_sampler, &gi_sampler) {
                Ok(l) => l,
                Err(e) if is_divergence(&e) => {
                    diverged = Some(format!("epoch {epoch}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            run.global_epoch += 1;
            let validation = run.validate()?;
            let rec = record(Stage::Joint, epoch, loss, run.log.steps.len() - steps_before, validation, start);
            let score = rec.validation.as_ref().and_then(|v| v.get(&k_stop)).map(|m| m.ndcg);
            info!(
                "epoch {epoch}: total = {:.6} (ui {:.6}, gi {:.6}, uu {:.6}){}",
                rec.total,
                rec.l_ui,
                rec.l_gi,
                rec.l_uu,
                score.map_or(String::new(), |s| format!(", val NDCG@{k_stop} = {s:.4}"))
            );
            on_epoch(&rec)?;
            run.log.epochs.push(rec);
            if let (Some(score), true) = (score, cfg.train.patience > 0) {
                if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                    best = Some((score, epoch, run.params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.train.patience {
                        info!("early stop after epoch {epoch}");
                        break;
                    }
                }
            }
        }
    }
    if let Some(reason) = &diverged {
        warn!("train: diverged at {reason}");
    }

    let mut best_epoch = None;
    let mut params = run.params;
    if diverged.is_none() {
        if let Some((_, epoch, p)) = best {
            params = p;
            best_epoch = Some(epoch);
        }
    }
    Ok(TrainOutcome {
        params,
        log: run.log,
        diverged,
        best_epoch,
    })
}
