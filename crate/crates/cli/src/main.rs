//! `pemi` command-line interface.
//!
//! Subcommands: train, eval, predict, gen-synth, inspect-weights,
//! export-embeddings, count-params. Logging level comes from the PEMI_LOG
//! environment variable (error, info, debug; default info). Exit codes:
//! 0 success, 2 config error, 3 data error, 4 checkpoint error, 1 other.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use pemi_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pemi", version, about = "Prompt tuning with a hierarchy-refining verbalizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides paths.out from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the metrics report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the label path for one argument pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        arg1: String,
        arg2: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic dataset named by paths.{train,dev,test}.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the per-parent normalized weight table of a checkpoint.
    InspectWeights {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export refined label embeddings as CSV plus a 2-D PCA scatter (SVG).
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Inclusive 1-based level range, e.g. 2..3 (default: all levels).
        #[arg(long)]
        level: Option<String>,
    },
    /// Report the trainable-parameter breakdown.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_level_range(spec: &str) -> Result<(usize, usize), Error> {
    let (a, b) = spec
        .split_once("..")
        .ok_or_else(|| Error::Config(format!("bad level range {spec:?}, expected A..B")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad level range {spec:?}, expected A..B")))
    };
    Ok((parse(a)?, parse(b)?))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_train(&cfg, seed, out.as_deref())
        }
        Command::Eval {
            checkpoint,
            data,
            out,
        } => commands::cmd_eval(&checkpoint, &data, out.as_deref()),
        Command::Predict {
            checkpoint,
            arg1,
            arg2,
            out,
        } => commands::cmd_predict(&checkpoint, &arg1, &arg2, out.as_deref()),
        Command::GenSynth { config, seed } => {
            let cfg = RunConfig::load(&config)?;
            commands::cmd_gen_synth(&cfg, seed)
        }
        Command::InspectWeights { checkpoint } => commands::cmd_inspect_weights(&checkpoint),
        Command::ExportEmbeddings {
            checkpoint,
            out,
            level,
        } => {
            let range = level.as_deref().map(parse_level_range).transpose()?;
            commands::cmd_export_embeddings(&checkpoint, &out, range)
        }
        Command::CountParams { config, checkpoint } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            commands::cmd_count_params(cfg.as_ref(), checkpoint.as_deref())
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Layout { .. } => 2,
        Error::Data { .. } | Error::Hierarchy(_) | Error::Length(_) | Error::Json(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PEMI_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
