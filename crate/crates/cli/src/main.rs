use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use kpz_core::harness::{execute, write_outputs, Command, FlatConfig, RunManifest};
use kpz_core::KpzError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Simulate,
    LimitDist,
    FiniteDist,
    Verify,
    Scaling,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::LimitDist => Command::LimitDist,
            Cmd::FiniteDist => Command::FiniteDist,
            Cmd::Verify => Command::Verify,
            Cmd::Scaling => Command::Scaling,
        }
    }
}

/// Stationary TASEP two-point function: exact numerics and simulation.
#[derive(Debug, Parser)]
#[command(name = "kpz-twopoint", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// Flat key = value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

const EXIT_FAILED_CHECKS: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ERROR: u8 = 3;

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let config = FlatConfig::load(&cli.config)
        .with_context(|| format!("reading config {}", cli.config.display()))?;
    let manifest = RunManifest::new(cli.command.into(), &config, cli.seed, cli.out.clone())?;
    let outcome = execute(&manifest, cli.workers)?;
    for path in write_outputs(&manifest, &outcome)? {
        println!("wrote {}", path.display());
    }
    if let Some(report) = &outcome.report {
        for c in &report.checks {
            let tag = if c.pass { "PASS" } else { "FAIL" };
            println!("{tag} {} measured={:e} tolerance={:e}", c.name, c.measured, c.tolerance);
        }
        if !report.pass {
            eprintln!("failing checks: {}", report.failing().join(", "));
            return Ok(ExitCode::from(EXIT_FAILED_CHECKS));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<KpzError>() {
                Some(KpzError::Usage(_)) => ExitCode::from(EXIT_USAGE),
                _ => ExitCode::from(EXIT_ERROR),
            }
        }
    }
}
