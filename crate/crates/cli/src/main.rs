//! `conlq`: solve constrained stochastic LQ problems from JSON configs.
//!
//! Exit status: 0 on success, 2 when a stationary problem has no solution,
//! 1 on any other error. Diagnostics go to stderr as `key=value` lines.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use report::Line;

#[derive(Debug, Parser)]
#[command(name = "conlq", version, about = "Constrained scalar-state stochastic LQ solvers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

/// Overrides shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory for result files (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Time steps of the Riccati grid, or points of the stationary scan.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Root tolerance on |F| and the switch tolerance of the Riccati integrator.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Random seed for Monte Carlo runs.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Number of Monte Carlo paths.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Regularize singular QP Hessians with a 1e-10 ridge instead of failing.
    #[arg(long, global = true)]
    pub ridge: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the Riccati pair of a finite-horizon config; writes the gain schedule.
    SolveFinite {
        /// Config with "kind": "finite".
        config: PathBuf,
    },
    /// Solve the algebraic Riccati pair of a stationary config.
    SolveStationary {
        /// Config with "kind": "stationary".
        config: PathBuf,
    },
    /// Tabulate F̂(g) and F̄(g) on a log grid; exits 2 when a branch has no sign change.
    #[command(name = "scan-F")]
    ScanF {
        /// Config with "kind": "stationary".
        config: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        g_min: f64,
        #[arg(long, default_value_t = 1e6)]
        g_max: f64,
    },
    /// Monte Carlo rollout of the optimal policy of a finite or stationary config.
    Simulate {
        config: PathBuf,
        /// Initial state.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        x0: f64,
        /// Simulation horizon; defaults to the config horizon, or 2 for stationary configs.
        #[arg(long)]
        horizon: Option<f64>,
        /// Euler step; defaults to horizon / 1000.
        #[arg(long)]
        dt: Option<f64>,
        /// Pair every path with its mirrored noise.
        #[arg(long)]
        antithetic: bool,
        /// Number of per-path traces to export (at most 100).
        #[arg(long, default_value_t = 0)]
        traces: usize,
    },
    /// Solve a mean-variance config: multiplier, discount and gain trajectories.
    MvSolve {
        /// Config with "kind": "mean_variance".
        config: PathBuf,
        /// Also check E[x(T)] against the target by simulation.
        #[arg(long)]
        verify: bool,
    },
    /// Efficient frontier for a list of targets (defaults to 110..=150 step 5).
    MvFrontier {
        config: PathBuf,
        /// Comma-separated expected terminal wealth targets.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
    },
    /// Single-period buy-and-hold comparator under the same cone constraints.
    MvBenchmark {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
        /// Wealth paths of both strategies exported for the config target.
        #[arg(long, default_value_t = 10)]
        wealth_paths: usize,
    },
    /// Phase-one feasibility of the constraint set at every grid point.
    CheckFeasibility { config: PathBuf },
}

fn configure_threads() {
    let Ok(raw) = std::env::var("CLQ_THREADS") else { return };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                Line::new("warn", "threads").field("message", e).emit();
            }
        }
        _ => Line::new("warn", "threads")
            .field("message", format!("ignoring CLQ_THREADS={raw:?}; expected a positive integer"))
            .emit(),
    }
}

fn main() -> ExitCode {
    report::install_logger();
    let cli = Cli::parse();
    configure_threads();
    match commands::run(&cli) {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::NoSolution) => ExitCode::from(2),
        Err(failure) => {
            failure.emit();
            ExitCode::from(1)
        }
    }
}
