//! `layerlab` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/format error,
//! 4 training divergence, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use layerlab::error::Error;
use layerlab::harness::{self, ExperimentConfig, ExperimentKind, ReportFormat};

#[derive(Parser, Debug)]
#[command(name = "layerlab", version, about = "Linearity probes and layer-surgery experiments")]
struct Cli {
    /// TOML experiment config; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for population replicates.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Start from this checkpoint instead of training the baseline.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured model and write `model.ntk`.
    Train,
    /// Per-layer γ, cone size and normalized γ.
    Probe,
    /// Hidden-layer linearity of ReLU and linear MLPs across L2 strengths.
    SweepValidation,
    /// Backwards replacement/removal sweeps.
    AblateBackwards,
    /// Two-layer swaps.
    Swap,
    /// Fixed-k shuffle populations.
    Shuffle,
    /// Stacks of one repeated layer.
    Repeat,
    /// Architecture variants trained from scratch.
    Variants,
    /// Re-emit a saved JSON report.
    Report {
        /// JSON report written by an earlier run.
        input: PathBuf,
        #[arg(long, value_enum, default_values_t = [Format::Csv])]
        format: Vec<Format>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Command {
    fn experiment(&self) -> Option<ExperimentKind> {
        Some(match self {
            Command::Train => ExperimentKind::Train,
            Command::Probe => ExperimentKind::Probe,
            Command::SweepValidation => ExperimentKind::SweepValidation,
            Command::AblateBackwards => ExperimentKind::AblateBackwards,
            Command::Swap => ExperimentKind::Swap,
            Command::Shuffle => ExperimentKind::Shuffle,
            Command::Repeat => ExperimentKind::Repeat,
            Command::Variants => ExperimentKind::Variants,
            Command::Report { .. } => return None,
        })
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Lookup(_) | Error::Compatibility(_)) => 2,
        Some(Error::Format { .. } | Error::Schema(_) | Error::Io(_) | Error::Json(_)) => 3,
        Some(Error::Divergence { .. }) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs.max(1);
    }
    if let Some(ckpt) = cli.checkpoint {
        cfg.checkpoint = Some(ckpt);
    }

    if let Command::Report { input, format } = &cli.command {
        let formats: Vec<ReportFormat> = format
            .iter()
            .map(|f| match f {
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            })
            .collect();
        for path in harness::convert_report(input, &cfg.out_dir, &formats)? {
            println!("{}", path.display());
        }
        return Ok(());
    }

    cfg.experiment = cli.command.experiment().context("report handled above")?;
    let report = harness::run(&cfg)?;
    if let Some(acc) = report.baseline_accuracy {
        println!("baseline accuracy {acc:.4}");
    }
    let stem = cfg.experiment.name();
    println!(
        "{} rows -> {}",
        report.rows.len(),
        cfg.out_dir.join(format!("{stem}.{{csv,json}}")).display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
