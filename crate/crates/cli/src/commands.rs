use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::json;

use hhgr::config::RunConfig;
use hhgr::data::{generate_synthetic, load_dataset, save_dataset, split_groups, InteractionDataset, SynthConfig};
use hhgr::eval::{evaluate as evaluate_split, MetricsReport};
use hhgr::hypergraph::{build_user_level, dump_coo, motif_adjacency, project_groups};
use hhgr::model::{load_checkpoint, save_checkpoint, sidecar_path, CheckpointMeta, Mode};
use hhgr::train::{train_with, TrainOutcome};
use hhgr::Error;

use crate::{AblateArgs, DataArgs, DataFiles, DumpArgs, EvaluateArgs, Overrides, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad input, config or data; exit code 2.
    Usage(String),
    /// Failure while running, such as divergence; exit code 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Diverged { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("io error on {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Sizes the rayon pool from `HHGR_THREADS`.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HHGR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("HHGR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("HHGR_SEED") {
        Ok(raw) => raw
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("HHGR_SEED must be an unsigned integer, got {raw:?}"))),
        Err(_) => Ok(None),
    }
}

/// File, then `HHGR_SEED`, then flags.
fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = env_seed()? {
        cfg.override_seeds(seed);
    }
    apply_overrides(&mut cfg, overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(mode) = o.mode {
        cfg.model.mode = mode;
    }
    if let Some(dim) = o.dim {
        cfg.model.dim = dim;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(e) = o.epochs_pretrain {
        cfg.train.epochs_pretrain = e;
    }
    if let Some(seed) = o.seed {
        cfg.override_seeds(seed);
    }
    if let Some(dir) = &o.out {
        cfg.output.dir = dir.clone();
    }
    if let Some(name) = &o.run_name {
        cfg.output.run_name = name.clone();
    }
}

fn apply_files(cfg: &mut RunConfig, files: &DataFiles) {
    for (slot, given) in [
        (&mut cfg.data.user_item, &files.user_item),
        (&mut cfg.data.group_item, &files.group_item),
        (&mut cfg.data.membership, &files.membership),
    ] {
        if given.is_some() {
            slot.clone_from(given);
        }
    }
}

fn files_given(files: &DataFiles) -> Option<(&Path, &Path, &Path)> {
    match (&files.user_item, &files.group_item, &files.membership) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    }
}

fn load_data(args: &DataArgs) -> Result<InteractionDataset> {
    if let Some((ui, gi, m)) = files_given(&args.files) {
        return Ok(load_dataset(ui, gi, m)?);
    }
    let path = args.config.as_ref().ok_or_else(|| {
        CliError::Usage("give --config or all of --user-item, --group-item and --membership".into())
    })?;
    let mut cfg = load_config(path, &Overrides::default())?;
    apply_files(&mut cfg, &args.files);
    cfg.validate()?;
    Ok(cfg.load_dataset()?.0)
}

fn hyperparameters(cfg: &RunConfig) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| CliError::Runtime(e.to_string()))
}

fn write_log(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut steps = outcome.log.steps.iter().peekable();
    let write_line = |w: &mut BufWriter<File>, v: serde_json::Value| -> Result<()> {
        writeln!(w, "{v}").map_err(|e| io_err(path, e))
    };
    for epoch in &outcome.log.epochs {
        while let Some(step) = steps.next_if(|s| s.stage == epoch.stage && s.epoch == epoch.epoch) {
            let mut v = serde_json::to_value(step).map_err(|e| CliError::Runtime(e.to_string()))?;
            v["kind"] = json!("step");
            write_line(&mut w, v)?;
        }
        let mut v = serde_json::to_value(epoch).map_err(|e| CliError::Runtime(e.to_string()))?;
        v["kind"] = json!("epoch");
        write_line(&mut w, v)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

struct TrainedRun {
    outcome: TrainOutcome,
    report: Option<MetricsReport>,
}

/// Trains `cfg` and evaluates on the test groups unless training diverged.
fn run_training(cfg: &RunConfig) -> Result<TrainedRun> {
    let dir = cfg.run_dir();
    create_dir(&dir)?;
    write_file(&dir.join("config.echo"), cfg.to_toml()?)?;
    let (ds, mapping) = cfg.load_dataset()?;
    if let Some(map) = mapping {
        map.save(dir.join("id_map.tsv"))?;
    }
    let split = split_groups(&ds, cfg.data.split, cfg.data.split_seed)?;
    info!(
        "{}: {} training, {} validation, {} test groups",
        cfg.model.mode,
        split.train_groups.len(),
        split.validation.len(),
        split.test.len()
    );
    let outcome = train_with(&split, cfg, |rec| {
        let val = rec
            .validation
            .as_ref()
            .and_then(|m| m.iter().next())
            .map(|(k, v)| format!(" val N@{k} {:.4} R@{k} {:.4}", v.ndcg, v.recall))
            .unwrap_or_default();
        info!(
            "{:?} epoch {}: total {:.4} (ui {:.4} gi {:.4} uu {:.4}){val}",
            rec.stage, rec.epoch, rec.total, rec.l_ui, rec.l_gi, rec.l_uu
        );
        Ok(())
    })?;
    let meta = CheckpointMeta::new(cfg.model.mode, outcome.params.dims, hyperparameters(cfg)?);
    save_checkpoint(dir.join("checkpoint.bin"), &outcome.params, &meta)?;
    write_log(&dir.join("train_log.jsonl"), &outcome)?;
    if outcome.diverged.is_some() {
        return Ok(TrainedRun { outcome, report: None });
    }
    let report = evaluate_split(&outcome.params, &split, cfg.model.mode, &cfg.eval)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&dir.join("metrics.json"), text + "\n")?;
    Ok(TrainedRun { outcome, report: Some(report) })
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let run = run_training(&cfg)?;
    let dir = cfg.run_dir();
    if let Some(reason) = &run.outcome.diverged {
        return Err(CliError::Runtime(format!(
            "training diverged ({reason}); last finite parameters kept in {}",
            dir.join("checkpoint.bin").display()
        )));
    }
    if let Some(best) = run.outcome.best_epoch {
        info!("kept parameters of joint epoch {best}");
    }
    if let Some(report) = &run.report {
        print!("{}", report.table(cfg.model.mode.name()));
    }
    info!("wrote {}", dir.display());
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let (params, meta) = load_checkpoint(&args.checkpoint)?;
    let mut cfg = match &args.config {
        Some(path) => load_config(path, &Overrides::default())?,
        None => {
            let side = sidecar_path(&args.checkpoint);
            let mut cfg: RunConfig = serde_json::from_value(meta.hyperparameters.clone()).map_err(|_| {
                CliError::Usage(format!("{} holds no run config; pass --config", side.display()))
            })?;
            if let Some(seed) = env_seed()? {
                cfg.override_seeds(seed);
            }
            cfg
        }
    };
    apply_files(&mut cfg, &args.files);
    if let Some(ks) = &args.ks {
        cfg.eval.ks = ks.clone();
    }
    cfg.validate()?;
    let (ds, _) = cfg.load_dataset()?;
    meta.check_dataset(ds.num_users(), ds.num_items(), ds.num_groups())?;
    let split = split_groups(&ds, cfg.data.split, cfg.data.split_seed)?;
    let report = evaluate_split(&params, &split, meta.mode, &cfg.eval)?;
    let out = args
        .output
        .unwrap_or_else(|| args.checkpoint.with_file_name("eval_metrics.json"));
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out, text + "\n")?;
    print!("{}", report.table(meta.mode.name()));
    Ok(())
}

/// Rows of `(variant, N@k, R@k)` in the usual comparison layout.
fn ablation_table(rows: &[(Mode, Option<(f64, f64)>)], k: usize) -> String {
    let mut out = format!("{:<10} {:>8} {:>8}\n", "Variant", format!("N@{k}"), format!("R@{k}"));
    for (mode, vals) in rows {
        match vals {
            Some((n, r)) => {
                let _ = writeln!(out, "{:<10} {n:>8.4} {r:>8.4}", mode.name());
            }
            None => {
                let _ = writeln!(out, "{:<10} {:>8} {:>8}", mode.name(), "diverged", "-");
            }
        }
    }
    out
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let base = load_config(&args.config, &args.overrides)?;
    let mut rows = Vec::new();
    let mut diverged = Vec::new();
    for &mode in &args.variants {
        let mut cfg = base.clone();
        cfg.model.mode = mode;
        if !cfg.eval.ks.contains(&args.k) {
            cfg.eval.ks.push(args.k);
        }
        cfg.output.dir = base.run_dir();
        cfg.output.run_name = mode.name().to_string();
        let run = run_training(&cfg)?;
        let vals = run.report.as_ref().and_then(|r| r.get(args.k)).map(|m| (m.ndcg, m.recall));
        if vals.is_none() {
            warn!("{mode} diverged");
            diverged.push(mode.name());
        }
        rows.push((mode, vals));
    }
    let table = ablation_table(&rows, args.k);
    let dir = base.run_dir();
    write_file(&dir.join("ablation.txt"), &table)?;
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|(m, v)| json!({ "variant": m.name(), "ndcg": v.map(|x| x.0), "recall": v.map(|x| x.1), "k": args.k }))
        .collect();
    write_file(&dir.join("ablation.json"), serde_json::Value::from(json).to_string() + "\n")?;
    print!("{table}");
    if diverged.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("diverged: {}", diverged.join(", "))))
    }
}

pub const USER_ITEM_FILE: &str = "users.tsv";
pub const GROUP_ITEM_FILE: &str = "groups_items.tsv";
pub const MEMBERSHIP_FILE: &str = "membership.tsv";

pub fn synth(args: SynthArgs) -> Result<()> {
    let seed = env_seed()?.unwrap_or(args.seed);
    let cfg = SynthConfig {
        num_users: args.users,
        num_items: args.items,
        num_groups: args.groups,
        group_size: (args.min_size, args.max_size),
        density: args.density,
        group_density: args.group_density,
        num_clusters: args.clusters,
        noise: args.noise,
        cohesion: args.cohesion,
        seed,
    };
    let ds = generate_synthetic(&cfg)?;
    create_dir(&args.out)?;
    let paths: Vec<PathBuf> = [USER_ITEM_FILE, GROUP_ITEM_FILE, MEMBERSHIP_FILE]
        .iter()
        .map(|f| args.out.join(f))
        .collect();
    save_dataset(&ds, &paths[0], &paths[1], &paths[2])?;
    let stats = ds.stats();
    let text = serde_json::to_string_pretty(&stats).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&args.out.join("stats.json"), text + "\n")?;
    print!("{}", stats.table("synthetic"));
    Ok(())
}

pub fn stats(args: DataArgs) -> Result<()> {
    let ds = load_data(&args)?;
    print!("{}", ds.stats().table("dataset"));
    Ok(())
}

pub fn dump_hypergraph(args: DumpArgs) -> Result<()> {
    let ds = load_data(&args.data)?;
    let h = build_user_level(ds.membership(), ds.num_users())?;
    let c = project_groups(&h);
    let t = motif_adjacency(&c);
    dump_coo(&args.out, &h, &c, &t)?;
    println!(
        "H {}x{} ({} entries), C {} edges, T {} entries -> {}",
        h.num_vertices(),
        h.num_edges(),
        h.nnz(),
        c.matrix().nnz() / 2,
        t.entries().len(),
        args.out.display()
    );
    Ok(())
}
