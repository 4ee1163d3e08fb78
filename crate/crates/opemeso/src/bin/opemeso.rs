//! Command-line entry point for the experiment runners.
//!
//! One subcommand per pipeline; each reads an optional flat key=value config
//! file on top of per-subcommand defaults, runs, and writes CSV or JSON to
//! `--out` (or the config's `output`, or stdout). Exit codes: 0 success,
//! 2 config error, 3 numerical or I/O failure, 4 acceptance gates failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use opemeso::experiments::{ExperimentConfig, OutputFormat, RunKind, RunResult};
use opemeso::Error;

#[derive(Parser)]
#[command(
    name = "opemeso",
    version,
    about = "Mesoscopic linear statistics of orthogonal polynomial ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Free resolvent: closed form vs tridiagonal solve, decay fits.
    Resolvent(RunArgs),
    /// Windowed decoupling norms and the rank-one update residual.
    Decoupling(RunArgs),
    /// Hankel trace-norm scaling, envelope bounds, kernel assembly.
    Hankel(RunArgs),
    /// Cumulant differences free vs perturbed across the grid.
    Stability(RunArgs),
    /// Second cumulant against the limiting variance target.
    Clt(RunArgs),
    /// Monte Carlo sampler against the deterministic trace route.
    Mc(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file layered over the subcommand defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path; overrides the config's `output`. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override for sampling runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for grid-parallel runs (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Resolvent(a) => (RunKind::Resolvent, a),
        Command::Decoupling(a) => (RunKind::Decoupling, a),
        Command::Hankel(a) => (RunKind::Hankel, a),
        Command::Stability(a) => (RunKind::Stability, a),
        Command::Clt(a) => (RunKind::Clt, a),
        Command::Mc(a) => (RunKind::Mc, a),
    };
    match execute(kind, args) {
        Ok(result) => {
            if result.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidInput(_) | Error::Config(_) => ExitCode::from(2),
                Error::Numerical(_) | Error::Io { .. } => ExitCode::from(3),
            }
        }
    }
}

fn execute(kind: RunKind, args: &RunArgs) -> opemeso::Result<RunResult> {
    if let Some(t) = args.threads {
        // Ignore the error from repeated initialization; the pool is global.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path, kind)?,
        None => ExperimentConfig::default_for(kind),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    }

    let result = kind.run(&cfg)?;
    let format = match args.format {
        Format::Csv => OutputFormat::Csv,
        Format::Json => OutputFormat::Json,
    };
    match &cfg.output {
        Some(path) => result.write(path, format)?,
        None => print!("{}", result.render(format)?),
    }
    eprintln!(
        "{}: {} rows, passed = {}",
        result.id,
        result.rows.len(),
        result.passed
    );
    for note in &result.notes {
        eprintln!("  {note}");
    }
    Ok(result)
}
