//! `ilro`: calibrate, solve, sweep, locking-range and compare workflows.

mod commands;
mod compare;
mod config;

use clap::{Parser, Subcommand};
use commands::{fail, Ctx, Outcome, CONFIG_ERROR};
use config::{parse_quantity, Hertz, RunConfig};
use ilro::{KAngleMode, SweepMode};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "ilro", version, about = "Injection-locked ring oscillator solver and oracle")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "ilro.toml")]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Oracle seed; overrides `oracle.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Angle entering the frequency constraint.
    #[arg(long, global = true)]
    k_angle: Option<KAngleMode>,
    /// More output; repeatable.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

fn hertz(s: &str) -> Result<f64, String> {
    parse_quantity::<Hertz>(s)
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Free-running capacitance sweep plus probes; writes the calibration table.
    Calibrate,
    /// Solve one operating point.
    Solve {
        #[arg(long, value_parser = hertz)]
        f_fr: f64,
        #[arg(long, value_parser = hertz)]
        f_inj: f64,
        #[arg(long)]
        epsilon: f64,
        /// Closed-form classic solution.
        #[arg(long)]
        classic: bool,
    },
    /// Sweep the free-running or injection frequency for every epsilon.
    Sweep {
        #[arg(long)]
        mode: SweepMode,
        /// Also run the time-domain oracle at every grid point.
        #[arg(long)]
        with_oracle: bool,
        #[arg(long)]
        classic: bool,
    },
    /// Locking-range edges per epsilon.
    LockingRange {
        #[arg(long, default_value = "ffr")]
        mode: SweepMode,
        #[arg(long)]
        classic: bool,
        /// Also bisect the oracle's lock edges.
        #[arg(long)]
        with_oracle: bool,
    },
    /// Agreement between a solver table and an oracle table.
    Compare {
        /// One joined table, or a solver table followed by an oracle table.
        #[arg(required = true, num_args = 1..=2)]
        tables: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Outcome {
    let cfg = RunConfig::load(&cli.config).map_err(|e| fail(CONFIG_ERROR, e))?;
    let verbosity = if cli.quiet { 0 } else { cfg.verbosity.saturating_add(cli.verbose) };
    let ctx = Ctx {
        out: cli.out.unwrap_or_else(|| cfg.out_dir.clone()),
        seed: cli.seed,
        k_angle: cli.k_angle.or(cfg.k_angle),
        verbosity,
        cfg,
    };
    match cli.command {
        Command::Calibrate => commands::calibrate(&ctx),
        Command::Solve {
            f_fr,
            f_inj,
            epsilon,
            classic,
        } => commands::solve(&ctx, f_fr, f_inj, epsilon, classic),
        Command::Sweep {
            mode,
            with_oracle,
            classic,
        } => commands::sweep_cmd(&ctx, mode, with_oracle, classic),
        Command::LockingRange {
            mode,
            classic,
            with_oracle,
        } => commands::locking_range_cmd(&ctx, mode, classic, with_oracle),
        Command::Compare { tables } => commands::compare_cmd(&ctx, &tables),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
