//! Run configuration, read from TOML.
//!
//! Every section and key is optional; missing values take the defaults
//! below and unknown keys are rejected. Relative paths resolve against the
//! directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_dataset, load_dataset_compacted, IdMapping, InteractionDataset, SplitRatios,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::{Mode, ModelDims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub dim: usize,
    pub user_layers: usize,
    pub group_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: Mode::S2,
            dim: 64,
            user_layers: 2,
            group_layers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Rate for user-side tensors, and for everything during pretraining.
    pub lr_user: f64,
    /// Rate for attention and motif-layer tensors.
    pub lr_group: f64,
    pub batch_size: usize,
    pub n_neg: usize,
    /// Contrastive-only epochs before joint training.
    pub epochs_pretrain: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_user: 5e-4,
            lr_group: 1e-4,
            batch_size: 512,
            n_neg: 10,
            epochs_pretrain: 20,
            epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub coarse_rate: f64,
    pub fine_rate: f64,
    /// Weight of the contrastive loss in the joint objective.
    pub beta: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            coarse_rate: 0.2,
            fine_rate: 0.3,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub user_item: Option<PathBuf>,
    pub group_item: Option<PathBuf>,
    pub membership: Option<PathBuf>,
    /// Generated dataset, used when no files are given.
    pub synthetic: Option<SynthConfig>,
    pub split: SplitRatios,
    pub split_seed: u64,
    /// Remap raw ids to dense ranges and write the mapping.
    pub compact_ids: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub run_name: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            run_name: "run".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ssl: SslConfig,
    pub data: DataConfig,
    pub eval: EvalOptions,
    pub output: OutputConfig,
}

fn in_range(ok: bool, what: &str, value: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} out of range: {value}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data.user_item, &mut self.data.group_item, &mut self.data.membership]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces every seed with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.split_seed = seed;
        if let Some(s) = &mut self.data.synthetic {
            s.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        in_range(m.dim >= 1, "model.dim", m.dim)?;
        let t = &self.train;
        in_range(t.lr_user > 0.0 && t.lr_user.is_finite(), "train.lr_user", t.lr_user)?;
        in_range(t.lr_group > 0.0 && t.lr_group.is_finite(), "train.lr_group", t.lr_group)?;
        in_range(t.batch_size >= 1, "train.batch_size", t.batch_size)?;
        in_range(t.n_neg >= 1, "train.n_neg", t.n_neg)?;
        let s = &self.ssl;
        in_range((0.0..1.0).contains(&s.coarse_rate), "ssl.coarse_rate", s.coarse_rate)?;
        in_range((0.0..1.0).contains(&s.fine_rate), "ssl.fine_rate", s.fine_rate)?;
        in_range(s.beta >= 0.0 && s.beta.is_finite(), "ssl.beta", s.beta)?;
        self.data.split.validate().map_err(|e| Error::Config(e.to_string()))?;
        let files = [&self.data.user_item, &self.data.group_item, &self.data.membership];
        let given = files.iter().filter(|p| p.is_some()).count();
        if given != 0 && given != 3 {
            return Err(Error::Config(
                "data.user_item, data.group_item and data.membership must be given together".into(),
            ));
        }
        if given == 0 && self.data.synthetic.is_none() {
            return Err(Error::Config("no dataset: give data files or a [data.synthetic] table".into()));
        }
        self.eval.validate().map_err(|e| Error::Config(e.to_string()))?;
        in_range(!self.output.run_name.is_empty(), "output.run_name", "\"\"")?;
        Ok(())
    }

    /// Loads or generates the configured dataset. The id mapping is returned
    /// when ids were compacted.
    pub fn load_dataset(&self) -> Result<(InteractionDataset, Option<IdMapping>)> {
        match (&self.data.user_item, &self.data.group_item, &self.data.membership) {
            (Some(ui), Some(gi), Some(mem)) => {
                if self.data.compact_ids {
                    let (ds, map) = load_dataset_compacted(ui, gi, mem)?;
                    Ok((ds, Some(map)))
                } else {
                    Ok((load_dataset(ui, gi, mem)?, None))
                }
            }
            _ => {
                let synth = self
                    .data
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::Config("no dataset configured".into()))?;
                Ok((generate_synthetic(synth)?, None))
            }
        }
    }

    pub fn dims(&self, ds: &InteractionDataset) -> ModelDims {
        ModelDims {
            users: ds.num_users(),
            items: ds.num_items(),
            groups: ds.num_groups(),
            dim: self.model.dim,
            user_layers: self.model.user_layers,
            group_layers: self.model.group_layers,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(&self.output.run_name)
    }
}
