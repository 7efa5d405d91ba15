//! `impctl` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use impctl::cli::config::Overrides;
use impctl::cli::{run, Command, Invocation};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Validate,
    Simulate,
    SolveQvi,
    CheckDpp,
    Adjoint,
    CheckMp,
    ExpansionOrder,
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Validate => Command::Validate,
            Cmd::Simulate => Command::Simulate,
            Cmd::SolveQvi => Command::SolveQvi,
            Cmd::CheckDpp => Command::CheckDpp,
            Cmd::Adjoint => Command::Adjoint,
            Cmd::CheckMp => Command::CheckMp,
            Cmd::ExpansionOrder => Command::ExpansionOrder,
            Cmd::Report => Command::Report,
        }
    }
}

/// Stochastic impulse control: simulation, QVI solver, adjoint BSDEs and
/// maximum-principle checks.
#[derive(Debug, Parser)]
#[command(name = "impctl", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset scenario; overrides `preset` in the config file.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
    /// Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Base time steps.
    #[arg(long)]
    steps: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let outcome = run(&Invocation {
        command: args.command.into(),
        config: args.config,
        overrides: Overrides {
            preset: args.preset,
            seed: args.seed,
            paths: args.paths,
            steps: args.steps,
        },
        out: args.out,
        threads: args.threads,
    });
    if let Some(m) = &outcome.message {
        eprintln!("error: {m}");
    }
    for p in &outcome.outputs {
        log::info!("wrote {}", p.display());
    }
    ExitCode::from(outcome.exit_code as u8)
}
