//! Command-line entry point: one subcommand per pipeline stage, plus a
//! convenience runner for the whole pipeline.

use anyhow::Context;
use clap::{Parser, Subcommand};
use modaudit::config::Backend;
use modaudit::stage::{dry_run, run_stage, Stage};
use modaudit::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "modaudit", version, about = "Modbus/TCP triage and audit pipeline")]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,

    /// Override the classifier back end from the config file.
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,

    /// Validate the config and dependency graph without writing artifacts.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse captures into the normalized frame store.
    Ingest,
    /// Build attack windows and binary labels.
    Label,
    /// Build the canonical leakage-free split.
    Split,
    /// Fit LEN/IAT bins on the train partition only.
    FitBins,
    /// Encode token strings and run the selected classifier back end.
    Classify,
    /// Run the second-pass auditor over stored predictions.
    Audit,
    /// Run sufficiency/necessity/counterfactual probes and curves.
    Probe,
    /// Emit the consolidated evaluation report.
    Report,
    /// Run every stage in dependency order.
    RunAll,
}

fn stage_of(command: &Command) -> Option<Stage> {
    match command {
        Command::Ingest => Some(Stage::Ingest),
        Command::Label => Some(Stage::Label),
        Command::Split => Some(Stage::Split),
        Command::FitBins => Some(Stage::FitBins),
        Command::Classify => Some(Stage::Classify),
        Command::Audit => Some(Stage::Audit),
        Command::Probe => Some(Stage::Probe),
        Command::Report => Some(Stage::Report),
        Command::RunAll => None,
    }
}

fn execute(stage: Stage, cfg: &RunConfig) -> anyhow::Result<()> {
    let output = run_stage(stage, cfg).with_context(|| format!("stage {stage} failed"))?;
    for path in &output.artifacts {
        eprintln!("{stage}: wrote {}", path.display());
    }
    if let Some(text) = output.stdout {
        print!("{text}");
    }
    Ok(())
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    if let Some(backend) = cli.backend {
        cfg.backend = backend;
    }

    if cli.dry_run {
        print!("{}", dry_run(&cfg)?);
        return Ok(());
    }

    match stage_of(&cli.command) {
        Some(stage) => execute(stage, &cfg)?,
        None => {
            for stage in Stage::PIPELINE_ORDER {
                execute(stage, &cfg)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
