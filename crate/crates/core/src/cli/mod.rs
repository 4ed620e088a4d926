//! The `cplsr` command-line tool.
//!
//! Every command writes into `<out>/<command>-<hash>`, where the hash is
//! taken over the resolved configuration, and starts by echoing that
//! configuration to `config.json`.

mod commands;
mod config;
mod table;

pub use commands::{Jsonl, ABLATION_ROWS};
pub use config::{DataConfig, Datasets, EvalConfig, GradCheckConfig, Overrides, RunConfig};
pub use table::Table;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::tensor::Precision;

#[derive(Debug, Parser)]
#[command(
    name = "cplsr",
    version,
    about = "Coalescent projections with latent space reservation on a toy ViT"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root of the run directories.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    /// Training episodes for train and ablate, evaluation episodes otherwise.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Episodic training of the adapter on the base dataset.
    Train(CommonArgs),
    /// Evaluate a checkpoint (or the untrained model) on the target datasets.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the five ablation configurations.
    Ablate(CommonArgs),
    /// Multiply-accumulate counts for frozen, CP and plain-prompt models.
    Bench(CommonArgs),
    /// Finite-difference check of adapter gradients.
    Gradcheck(CommonArgs),
    /// Write CLS embeddings and labels of every dataset.
    ExportEmbeddings {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate(_) => "ablate",
            Command::Bench(_) => "bench",
            Command::Gradcheck(_) => "gradcheck",
            Command::ExportEmbeddings { .. } => "export-embeddings",
        }
    }

    fn parts(&self) -> (&CommonArgs, Option<&PathBuf>) {
        match self {
            Command::Train(c) | Command::Ablate(c) | Command::Bench(c) | Command::Gradcheck(c) => (c, None),
            Command::Eval { common, checkpoint } | Command::ExportEmbeddings { common, checkpoint } => {
                (common, checkpoint.as_ref())
            }
        }
    }
}

/// Resolve the configuration of a parsed command line.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let (common, checkpoint) = command.parts();
    let base = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        precision: common.precision.as_deref().map(str::parse::<Precision>).transpose()?,
        episodes: common.episodes,
        checkpoint: checkpoint.cloned(),
    };
    base.resolve(command.name(), &overrides)
}

/// Run a parsed command; returns the run directory.
pub fn execute(command: &Command) -> Result<PathBuf> {
    let cfg = resolve(command)?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = serde_json::to_string_pretty(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("config.json");
    fs::write(&path, resolved + "\n").map_err(|e| Error::io(&path, e))?;
    eprintln!("run directory {}", dir.display());
    let f64_mode = cfg.precision == Precision::F64;
    match command {
        Command::Train(_) if f64_mode => commands::run_train::<f64>(&cfg, &dir),
        Command::Train(_) => commands::run_train::<f32>(&cfg, &dir),
        Command::Eval { .. } if f64_mode => commands::run_eval::<f64>(&cfg, &dir),
        Command::Eval { .. } => commands::run_eval::<f32>(&cfg, &dir),
        Command::Ablate(_) if f64_mode => commands::run_ablate::<f64>(&cfg, &dir),
        Command::Ablate(_) => commands::run_ablate::<f32>(&cfg, &dir),
        Command::Bench(_) => commands::run_bench(&cfg, &dir),
        Command::Gradcheck(_) => commands::run_gradcheck(&cfg, &dir),
        Command::ExportEmbeddings { .. } if f64_mode => commands::run_export::<f64>(&cfg, &dir),
        Command::ExportEmbeddings { .. } => commands::run_export::<f32>(&cfg, &dir),
    }?;
    Ok(dir)
}

/// Parse arguments, run, and map the outcome to a process exit code:
/// 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
