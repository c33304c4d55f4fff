//! Planted-preference synthetic datasets.
//!
//! Items are cut into contiguous latent clusters. Each group draws a cluster,
//! mostly recruits users whose home cluster matches, and both its members'
//! user-item rows and its own group-item row are sampled with elevated
//! probability inside that cluster.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::sparse::SparseBinary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_groups: usize,
    /// Inclusive member-count range.
    pub group_size: (usize, usize),
    /// In-cluster interaction probability for user rows.
    pub density: f64,
    /// In-cluster probability for group rows; `None` reuses `density`.
    pub group_density: Option<f64>,
    /// Number of latent item clusters; `None` picks `ceil(sqrt(num_groups))`.
    pub num_clusters: Option<usize>,
    /// Out-of-cluster probability as a fraction of the in-cluster one.
    pub noise: f64,
    /// Probability a member is recruited from the group's home-cluster users.
    pub cohesion: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 500,
            num_groups: 80,
            group_size: (2, 6),
            density: 0.2,
            group_density: None,
            num_clusters: None,
            noise: 0.02,
            cohesion: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.num_users == 0 || self.num_items < 2 || self.num_groups == 0 {
            return fail("need at least 1 user, 2 items and 1 group".into());
        }
        let (lo, hi) = self.group_size;
        if lo == 0 || lo > hi {
            return fail(format!("invalid group size range {lo}..={hi}"));
        }
        if hi > self.num_users {
            return fail(format!(
                "group size up to {hi} exceeds {} users",
                self.num_users
            ));
        }
        let in_unit = |p: f64| p > 0.0 && p <= 1.0;
        if !in_unit(self.density) {
            return Err(Error::Parameter(format!(
                "density must be in (0, 1], got {}",
                self.density
            )));
        }
        if let Some(gd) = self.group_density {
            if !in_unit(gd) {
                return Err(Error::Parameter(format!(
                    "group density must be in (0, 1], got {gd}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.cohesion) {
            return fail("noise and cohesion must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn clusters(&self) -> usize {
        let k = self
            .num_clusters
            .unwrap_or_else(|| (self.num_groups as f64).sqrt().ceil() as usize);
        k.clamp(1, self.num_items)
    }

    pub fn item_cluster(&self, item: usize) -> usize {
        item * self.clusters() / self.num_items
    }
}

fn sample_row(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    elevated: &[bool],
    p_in: f64,
) -> Vec<usize> {
    let p_out = p_in * cfg.noise;
    let mut row: Vec<usize> = (0..cfg.num_items)
        .filter(|&i| {
            let p = if elevated[cfg.item_cluster(i)] { p_in } else { p_out };
            rng.gen::<f64>() < p
        })
        .collect();
    if row.is_empty() {
        let pool: Vec<usize> = (0..cfg.num_items)
            .filter(|&i| elevated[cfg.item_cluster(i)])
            .collect();
        row.push(*pool.choose(rng).expect("every cluster is nonempty"));
    }
    if row.len() == cfg.num_items {
        // keep at least one negative
        let outside: Vec<usize> = (0..cfg.num_items)
            .filter(|&i| !elevated[cfg.item_cluster(i)])
            .collect();
        let drop = *outside.choose(rng).unwrap_or(&(cfg.num_items - 1));
        row.retain(|&i| i != drop);
    }
    row
}

/// Generates a dataset with learnable group preferences. Deterministic in
/// `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<InteractionDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.clusters();

    let home: Vec<usize> = (0..cfg.num_users).map(|_| rng.gen_range(0..k)).collect();
    let mut by_cluster = vec![Vec::new(); k];
    for (u, &c) in home.iter().enumerate() {
        by_cluster[c].push(u);
    }

    let group_cluster: Vec<usize> = (0..cfg.num_groups).map(|_| rng.gen_range(0..k)).collect();
    let mut membership = Vec::with_capacity(cfg.num_groups);
    for &c in &group_cluster {
        let size = rng.gen_range(cfg.group_size.0..=cfg.group_size.1);
        let mut members: Vec<usize> = Vec::with_capacity(size);
        while members.len() < size {
            let local = &by_cluster[c];
            let u = if !local.is_empty() && rng.gen::<f64>() < cfg.cohesion {
                local[rng.gen_range(0..local.len())]
            } else {
                rng.gen_range(0..cfg.num_users)
            };
            if !members.contains(&u) {
                members.push(u);
            }
            if members.len() < size && by_cluster[c].iter().all(|u| members.contains(u)) {
                // home cluster exhausted; finish from the whole population
                let mut rest: Vec<usize> =
                    (0..cfg.num_users).filter(|u| !members.contains(u)).collect();
                rest.shuffle(&mut rng);
                members.extend(rest.into_iter().take(size - members.len()));
            }
        }
        members.sort_unstable();
        membership.push(members);
    }

    let mut elevated = vec![vec![false; k]; cfg.num_users];
    for (g, members) in membership.iter().enumerate() {
        for &u in members {
            elevated[u][group_cluster[g]] = true;
        }
    }
    for (u, e) in elevated.iter_mut().enumerate() {
        if !e.iter().any(|&x| x) {
            e[home[u]] = true;
        }
    }

    let mut ui_pairs = Vec::new();
    for (u, e) in elevated.iter().enumerate() {
        ui_pairs.extend(sample_row(&mut rng, cfg, e, cfg.density).into_iter().map(|i| (u, i)));
    }
    let p_group = cfg.group_density.unwrap_or(cfg.density);
    let mut gi_pairs = Vec::new();
    for (g, &c) in group_cluster.iter().enumerate() {
        let mut e = vec![false; k];
        e[c] = true;
        gi_pairs.extend(sample_row(&mut rng, cfg, &e, p_group).into_iter().map(|i| (g, i)));
    }

    let user_item = SparseBinary::from_pairs(cfg.num_users, cfg.num_items, ui_pairs)?;
    let group_item = SparseBinary::from_pairs(cfg.num_groups, cfg.num_items, gi_pairs)?;
    InteractionDataset::new(user_item, group_item, membership)
}
