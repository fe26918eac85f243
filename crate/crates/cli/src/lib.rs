//! `medcorr` command-line interface: ingest, index, reason-bank building,
//! method runs, evaluation and ablation.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use medcorr_core::corpus::DatasetName;

use crate::commands::{Method, Run};
use crate::config::{BackendMode, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "medcorr",
    version,
    about = "Detect and correct medical errors in clinical notes"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; `${VAR}` is replaced from the environment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `backend.mode`.
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendMode>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum concurrent LLM requests.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress the JSON summary printed after each command.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate a dataset file; optionally write it in canonical form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "CUSTOM")]
        name: DatasetName,
        /// Canonical output (.csv or .jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Embed the training split and persist the retrieval index.
    Index,
    /// Reason-bank maintenance.
    Reasons {
        #[command(subcommand)]
        action: ReasonsAction,
    },
    /// Run one method over the eval split.
    Run {
        #[arg(value_enum)]
        method: Method,
        /// Overrides the configured eval split.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Score a prediction file against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Reference predictions or an annotated dataset; defaults to the eval split.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Dataset label in the report (defaults to `eval_name`).
        #[arg(long)]
        name: Option<String>,
        /// Output file stem inside the output directory.
        #[arg(long, default_value = "evaluation")]
        stem: String,
    },
    /// Detection accuracy across shot counts, with and without the CoT stages.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
        shots: Vec<usize>,
        #[arg(long)]
        eval: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReasonsAction {
    /// Generate missing or stale reasons for the training split.
    Build,
}

/// Applies command-line overrides to the loaded (or default) configuration.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = g.backend {
        cfg.backend.mode = m;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &g.out {
        cfg.out = std::env::current_dir()?.join(o);
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(quiet: bool, value: &T) -> Result<()> {
    if !quiet {
        println!("{}", serde_json::to_string_pretty(value)?);
    }
    Ok(())
}

pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    execute(Cli::try_parse_from(args)?)
}

pub fn execute(cli: Cli) -> Result<()> {
    let q = cli.global.quiet;
    if let Command::Ingest { input, name, output } = &cli.command {
        return print_json(q, &commands::ingest(input, *name, output.as_deref())?);
    }
    let cfg = resolve_config(&cli.global)?;
    let run = Run::new(cfg)?;
    match cli.command {
        Command::Ingest { .. } => unreachable!("handled above"),
        Command::Index => print_json(q, &commands::index(&run)?),
        Command::Reasons {
            action: ReasonsAction::Build,
        } => print_json(q, &commands::reasons_build(&run)?),
        Command::Run { method, eval } => print_json(q, &commands::run_method(&run, method, eval.as_deref())?),
        Command::Evaluate {
            pred,
            reference,
            name,
            stem,
        } => {
            let reference = match reference {
                Some(r) => r,
                None => run
                    .cfg
                    .eval
                    .as_ref()
                    .map(|p| run.cfg.resolve(p))
                    .ok_or_else(|| anyhow::anyhow!("--ref not given and config sets no eval split"))?,
            };
            let name = name.unwrap_or_else(|| run.cfg.eval_name.clone());
            let report = commands::evaluate(&run, &pred, &reference, &name, &stem)?;
            if !q {
                print!("{}", medcorr_core::eval::report_table(&[report]));
            }
            Ok(())
        }
        Command::Ablate { shots, eval } => print_json(q, &commands::ablate(&run, &shots, eval.as_deref())?),
    }
}
