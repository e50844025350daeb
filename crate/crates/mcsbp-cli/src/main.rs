//! `mcsbp` — analytics of multi-type continuous-state branching
//! processes cross-verified against exact particle simulation.

mod bundle;
mod commands;
mod config;
mod specparse;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use config::FlagLayer;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mcsbp",
    version,
    about = "Multi-type continuous-state branching processes: cumulant flows, spectral radius schedules, extinction solvers, spine identities, and particle Monte Carlo"
)]
struct Cli {
    /// Master seed (flags win over the config file, which wins over
    /// MCSBP_SEED). Required for stochastic commands; never defaulted
    /// from the clock.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo; results are worker-count
    /// invariant (MCSBP_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output file (tables) or directory (bundles); stdout when omitted
    /// for table commands (MCSBP_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimateKind {
    Laplace,
    Extinction,
    Martingale,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate the cumulant flow V_t f on a truncation; CSV columns (t, i, V).
    Cumulant {
        #[arg(long)]
        model: PathBuf,
        /// Vector spec: const:θ | ind:1,2[:θ] | list:1=v,2=v.
        #[arg(long)]
        f: String,
        #[arg(long = "T")]
        t: f64,
        #[arg(long)]
        n: usize,
        /// Output grid intervals.
        #[arg(long, default_value_t = 256)]
        grid: usize,
    },
    /// Spectral radius over a truncation schedule; CSV (n, lambda_n, residual).
    Spectral {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated truncation sizes; defaults to 25,50,...,800.
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
        /// Compute the placement kernel's decay parameter instead;
        /// CSV (n, kappa_n).
        #[arg(long)]
        kingman: bool,
    },
    /// Global and local extinction on a truncation; JSON report.
    Extinction {
        #[arg(long)]
        model: PathBuf,
        /// Finite type set A, e.g. --set 1,2.
        #[arg(long, value_delimiter = ',')]
        set: Vec<usize>,
        #[arg(long)]
        n: usize,
        #[arg(long, value_delimiter = ',')]
        schedule: Option<Vec<usize>>,
    },
    /// Simulate the rescaled particle system; trajectory CSV
    /// (rep, t, type, count), or an estimator report with --estimate.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        k: u32,
        #[arg(long = "T")]
        t: f64,
        #[arg(long)]
        reps: u64,
        #[arg(long, value_enum)]
        estimate: Option<EstimateKind>,
        /// Test vector for --estimate laplace.
        #[arg(long)]
        f: Option<String>,
        /// Truncation for killed runs (martingale estimator).
        #[arg(long)]
        n: Option<usize>,
        /// Initial mass, e.g. list:1=1.0; defaults to one unit on type 1.
        #[arg(long)]
        mu: Option<String>,
    },
    /// Spine identity check on a truncation; JSON {lhs, rhs, se, z, ...}.
    Spine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        f: String,
        #[arg(long)]
        g: String,
        #[arg(long)]
        t: f64,
        /// Run the two-sided check (currently the only mode).
        #[arg(long)]
        check: bool,
        #[arg(long, default_value_t = 200)]
        k: u32,
        #[arg(long, default_value_t = 100_000)]
        reps: u64,
    },
    /// Run a worked example scenario (1, 2 or 3) into a result bundle.
    Example {
        /// Scenario number.
        which: u8,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the verification suite into a result bundle.
    /// Exit codes: 0 all pass, 1 any fail, 2 any inconclusive.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let flags = FlagLayer {
        seed: cli.seed,
        workers: cli.workers,
        out: cli.out.clone(),
    };
    let code = match run(cli, flags) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli, flags: FlagLayer) -> Result<i32> {
    match cli.cmd {
        Cmd::Cumulant { model, f, t, n, grid } => {
            commands::cumulant::run(&model, &f, t, n, grid, &flags)
        }
        Cmd::Spectral {
            model,
            schedule,
            kingman,
        } => commands::spectral::run(&model, schedule.as_deref(), kingman, &flags),
        Cmd::Extinction {
            model,
            set,
            n,
            schedule,
        } => commands::extinction::run(&model, &set, n, schedule.as_deref(), &flags),
        Cmd::Simulate {
            model,
            k,
            t,
            reps,
            estimate,
            f,
            n,
            mu,
        } => commands::simulate::run(
            &model,
            k,
            t,
            reps,
            estimate,
            f.as_deref(),
            n,
            mu.as_deref(),
            &flags,
        ),
        Cmd::Spine {
            model,
            n,
            f,
            g,
            t,
            check: _,
            k,
            reps,
        } => commands::spine::run(&model, n, &f, &g, t, k, reps, &flags),
        Cmd::Example { which, config } => {
            commands::examples::run(which, config.as_deref(), &flags)
        }
        Cmd::Suite { config } => commands::suite::run(config.as_deref(), &flags),
    }
}
