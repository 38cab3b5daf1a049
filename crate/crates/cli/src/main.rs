mod commands;
mod plot;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Phantom generation, cleaning, teacher/student training, evaluation and
/// ablation experiments.
#[derive(Parser, Debug)]
#[command(name = "ugss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantoms and a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Resample and window every record of a dataset.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Crop, delete and discard according to hip-relative thresholds.
    Clean {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Histogram bin width in mm.
        #[arg(long, default_value_t = 2.5)]
        bin_mm: f64,
    },
    /// Train a K-head teacher on fully annotated records.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Fully annotated records for checkpoint selection.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Fill missing organs and write uncertainty maps with a trained model.
    Impute {
        #[command(flatten)]
        common: Common,
        /// Input datasets, merged into one output dataset. Repeatable.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train a student on clinical plus imputed labels.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Score a checkpoint on a fully annotated test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the ablation arms over the folds of an experiment.
    Ablation {
        #[command(flatten)]
        common: Common,
        /// Number of folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_folds: usize,
        /// Where checkpoints of every trained model are kept.
        #[arg(long, env = "UGSS_CACHE_DIR")]
        cache_dir: Option<PathBuf>,
    },
    /// Draw SVG charts from an ablation results directory.
    Plot {
        /// Results directory written by `ablation`.
        #[arg(long)]
        results: PathBuf,
        /// Defaults to `<results>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = commands::name(&cli.command);
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ugss {name}: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
