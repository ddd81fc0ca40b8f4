//! Command-line front end for the sequential stopping toolkit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing/invalid
//! dependency (datasets, artifacts), 4 numerical failure.

mod commands;
mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqstop::error::Error;

#[derive(Parser)]
#[command(
    name = "seqstop",
    about = "Sequential stopping designs: simulation, dynamic programming, decision boundaries, and reinforcement learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path overrides, e.g. --set env.example1.theta1=0.45.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory (defaults to the config's output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Dataset CSV consumed/produced (defaults to <out>/dataset.csv).
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Worker pool size; 0 uses the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the no-stopping forward-simulation dataset.
    Simulate,
    /// Constrained backward induction on the dataset grid.
    Dp,
    /// Parametric boundary search with a quadratic response surface.
    Boundary,
    /// Tabular Q-learning on the binary trial.
    Qlearn,
    /// Deep Q-network training on the binary trial.
    Dqn,
    /// Policy-gradient training on the dose-finding trial.
    Pg,
    /// Exact dynamic-programming solution of the binary trial.
    Oracle,
    /// Collate CSV artifacts and render SVG views.
    Report,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Resource(_) => 2,
        Error::Data { .. } | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = config::load_config(cli.config.as_deref(), &cli.set)?;
    let threads = cli.threads.unwrap_or(config.output.threads);
    let ctx = commands::Ctx::new(config, cli.out, cli.data);
    let body = || match cli.command {
        Command::Simulate => commands::simulate(&ctx),
        Command::Dp => commands::dp(&ctx),
        Command::Boundary => commands::boundary(&ctx),
        Command::Qlearn => commands::qlearn(&ctx),
        Command::Dqn => commands::dqn(&ctx),
        Command::Pg => commands::pg(&ctx),
        Command::Oracle => commands::oracle(&ctx),
        Command::Report => commands::report(&ctx),
    };
    if threads == 0 {
        body()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
        pool.install(body)
    }
}
