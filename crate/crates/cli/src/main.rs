use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hhgr::model::Mode;

mod commands;

use commands::CliError;

/// Hierarchical hypergraph group recommendation.
#[derive(Debug, Parser)]
#[command(name = "hhgr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, log and test metrics.
    Train(TrainArgs),
    /// Score a checkpoint on the test groups of its dataset.
    Evaluate(EvaluateArgs),
    /// Train several variants on the same data and compare them.
    Ablate(AblateArgs),
    /// Generate a planted-preference synthetic dataset.
    Synth(SynthArgs),
    /// Print dataset statistics.
    Stats(DataArgs),
    /// Write H, C and T as coordinate lists.
    DumpHypergraph(DumpArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flags that take precedence over the config file.
#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epochs_pretrain: Option<usize>,
    /// Replaces every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset and split settings; defaults to the config stored with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub files: DataFiles,
    /// Comma-separated cutoffs, e.g. `5,10`.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Metrics JSON path; defaults to `eval_metrics.json` next to the checkpoint.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated modes, e.g. `HHGR-wu,HHGR-wg,HHGR`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub variants: Vec<Mode>,
    /// Cutoff shown in the table.
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for the three TSV files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 500)]
    pub items: usize,
    #[arg(long, default_value_t = 80)]
    pub groups: usize,
    #[arg(long, default_value_t = 2)]
    pub min_size: usize,
    #[arg(long, default_value_t = 6)]
    pub max_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub density: f64,
    #[arg(long)]
    pub group_density: Option<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.8)]
    pub cohesion: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Default)]
pub struct DataFiles {
    #[arg(long)]
    pub user_item: Option<PathBuf>,
    #[arg(long)]
    pub group_item: Option<PathBuf>,
    #[arg(long)]
    pub membership: Option<PathBuf>,
}

/// A dataset given either by a config file or by the three files.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub files: DataFiles,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = commands::init_threads().and_then(|()| match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Stats(a) => commands::stats(a),
        Command::DumpHypergraph(a) => commands::dump_hypergraph(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Runtime(_) => ExitCode::from(1),
                CliError::Usage(_) => ExitCode::from(2),
            }
        }
    }
}
