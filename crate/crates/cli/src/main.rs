//! `focal3d`: synthetic data, training, prediction, evaluation and analyses.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use focal3d::Error;

#[derive(Parser, Debug)]
#[command(name = "focal3d", version, about = "Focal-loss 3D detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand: the run configuration and overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set loss.gamma=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Same as `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Same as `--set detector=NAME`.
    #[arg(long)]
    pub detector: Option<String>,
    /// Same as `--set loss.gamma=G`.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Same as `--set data.root=DIR`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic KITTI-layout dataset from the scene recipe.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the two-phase schedule on the dataset's training split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write KITTI-format result files for a checkpoint.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP report for a checkpoint or a directory of result files.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "results", required_unless_present = "results")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss CDFs, hardest-k shares and posterior histograms.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Prediction dump (`y,p_t` CSV).
        #[arg(long, conflicts_with = "checkpoint")]
        dump: Option<PathBuf>,
        /// Sample a dump from a checkpoint on the validation split.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fore-background imbalance of the target assignment.
    Imbalance {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Synthetic scenes to use when no dataset is given.
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer floating-point operation estimate.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write `flops.csv` and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Numeric { .. } => 4,
        Error::Parse { .. }
        | Error::Io { .. }
        | Error::Version { .. }
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Generation(_) => 3,
        Error::Domain(_) | Error::Structural(_) | Error::State(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { cfg, count, out } => commands::gen_data(&cfg, count, &out),
        Command::Train { cfg, out } => commands::train(&cfg, &out),
        Command::Predict {
            cfg,
            checkpoint,
            split,
            out,
        } => commands::predict(&cfg, &checkpoint, split, &out),
        Command::Eval {
            cfg,
            checkpoint,
            results,
            split,
            out,
        } => commands::eval(&cfg, checkpoint.as_deref(), results.as_deref(), split, &out),
        Command::Analyze {
            cfg,
            dump,
            checkpoint,
            out,
        } => commands::analyze(&cfg, dump.as_deref(), checkpoint.as_deref(), &out),
        Command::Imbalance { cfg, scenes, out } => commands::imbalance(&cfg, scenes, &out),
        Command::Flops { cfg, out } => commands::flops(&cfg, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
