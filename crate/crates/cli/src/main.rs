//! `nleig`: eigentriples, single-ε solves and branch continuation from a
//! JSON config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod report;

use config::{Command, RunConfig};
use report::{write_json, CliError, EXIT_OK, EXIT_PARTIAL};

#[derive(Parser)]
#[command(version, about = "Nonlinear eigenvalue bifurcations of discretized operators")]
struct Cli {
    #[command(subcommand)]
    command: CommandArg,
}

#[derive(Subcommand)]
enum CommandArg {
    /// Eigentriples near the configured targets.
    Spectrum(RunArgs),
    /// Fixed-point solve at the configured ε.
    Solve(RunArgs),
    /// Branch continuation, bifurcation detection and switching.
    Continue(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for the sampled solver diagnostics.
    #[arg(long)]
    seed: Option<u64>,
    /// Branches continued in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn output_dir(cfg: &RunConfig, args: &RunArgs) -> Result<PathBuf, CliError> {
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `output`".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn run(command: Command, args: &RunArgs, out: &mut Option<PathBuf>) -> Result<commands::Outcome, CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let dir = output_dir(&cfg, args)?;
    *out = Some(dir.clone());
    cfg.check(command)?;
    match command {
        Command::Spectrum => commands::spectrum(&cfg, &dir),
        Command::Solve => commands::solve(&cfg, args.seed, &dir),
        Command::Continue => commands::continuation(&cfg, args.jobs, &dir),
        Command::Oracle => unreachable!("rejected by RunConfig::check"),
    }
}

fn emit(err: &CliError, out: Option<&Path>) {
    let report = err.report();
    match serde_json::to_string(&report) {
        Ok(text) => eprintln!("{text}"),
        Err(_) => eprintln!("{err}"),
    }
    if let Some(dir) = out {
        if let Err(e) = write_json(&dir.join("error.json"), &report) {
            eprintln!("{e}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        CommandArg::Spectrum(a) => (Command::Spectrum, a),
        CommandArg::Solve(a) => (Command::Solve, a),
        CommandArg::Continue(a) => (Command::Continue, a),
    };
    let mut out = None;
    match run(command, args, &mut out) {
        Ok(commands::Outcome { partial: None }) => ExitCode::from(EXIT_OK),
        Ok(commands::Outcome { partial: Some(err) }) => {
            emit(&err, out.as_deref());
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(err) => {
            emit(&err, out.as_deref());
            ExitCode::from(err.exit_code())
        }
    }
}
