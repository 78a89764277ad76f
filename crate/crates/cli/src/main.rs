use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;
mod config;
mod output;

use commands::Common;
use config::Overrides;

/// Solver for the torus-invariant coupled Kahler-Yang-Mills equations on toric
/// surfaces.
///
/// Exit codes: 0 success, 1 non-convergence or failed check, 2 invalid input.
#[derive(Parser)]
#[command(name = "kym", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (default: [run].out, then ./kym-out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Lattice cells per unit length.
    #[arg(long, global = true, value_name = "N")]
    grid: Option<usize>,
    /// Seed for the configured perturbation.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Residual tolerance.
    #[arg(long, global = true, value_name = "FLOAT")]
    tol: Option<f64>,
    /// Coupling alpha0 for commands that read states (overrides the config).
    #[arg(long, global = true)]
    alpha0: Option<f64>,
    /// Coupling alpha1 for commands that read states (overrides the config).
    #[arg(long, global = true)]
    alpha1: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Damped Newton at the configured coupling.
    Solve,
    /// Continuation along [coupling].path.
    Continue,
    /// Topological constants, Futaki character and functionals of a state.
    Invariants { state: Option<PathBuf> },
    /// K-energy along the geodesic between two states.
    Geodesic {
        start: Option<PathBuf>,
        end: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Descent flow of the Calabi-Yang-Mills functional.
    Flow,
    /// Consistency checks on a stored state.
    Check { state: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = Common {
        config: cli.config,
        out: cli.out,
        overrides: Overrides { grid: cli.grid, seed: cli.seed, tol: cli.tol },
        alpha0: cli.alpha0,
        alpha1: cli.alpha1,
    };
    let code = match &cli.command {
        Command::Solve => commands::run("solve", &common, commands::solve),
        Command::Continue => commands::run("continue", &common, commands::continue_path),
        Command::Flow => commands::run("flow", &common, commands::flow),
        Command::Invariants { state } => commands::run("invariants", &common, |c| commands::invariants(c, state.as_deref())),
        Command::Geodesic { start, end, samples } => {
            commands::run("geodesic", &common, |c| commands::geodesic(c, start.as_deref(), end.as_deref(), *samples))
        }
        Command::Check { state } => commands::run("check", &common, |c| commands::check(c, state)),
    };
    ExitCode::from(code)
}
