// Copyright 2026 The vlgrape Authors
// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vlgrape::cli::{
    cmd_evaluate, cmd_filter_function, cmd_grad_check, cmd_optimize, cmd_sweep, parse_axis, parse_quantity,
    AxisSpec, EvaluateArgs, FilterArgs, GradCheckArgs, OptimizeArgs, PulseSource, SweepArgs, EXIT_ERROR,
};
use vlgrape::objective::GradientMode;

#[derive(Parser)]
#[command(name = "vlgrape", version, about = "Robust pulse optimization with Van Loan penalties")]
struct Cli {
    /// Worker threads for Monte Carlo and per-term propagation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    FirstOrder,
}

#[derive(clap::Args)]
struct PulseArg {
    /// Pulse file written by `optimize`.
    #[arg(long, conflicts_with = "original")]
    pulse: Option<PathBuf>,
    /// Use the preset's original pulse.
    #[arg(long)]
    original: bool,
}

impl PulseArg {
    fn source(&self) -> Result<PulseSource, String> {
        match (&self.pulse, self.original) {
            (Some(p), false) => Ok(PulseSource::File(p.clone())),
            (None, true) => Ok(PulseSource::Original),
            _ => Err("give --pulse FILE or --original".into()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run GRAPE and write the pulse and its trace.
    Optimize {
        config: PathBuf,
        #[arg(long, default_value = "pulse.json")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report Φ₀, penalties, leakage and the Monte Carlo fidelity of a pulse.
    Evaluate {
        config: PathBuf,
        #[command(flatten)]
        pulse: PulseArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        realizations: Option<usize>,
        /// Set every noise strength to zero.
        #[arg(long)]
        noiseless: bool,
    },
    /// Quasi-static fidelity over one or two static noise axes.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        pulse: PulseArg,
        /// `name:low:high:steps`, e.g. `coupling:-30kHz:30kHz:21`.
        #[arg(long = "axis", value_parser = parse_axis_arg)]
        axes: Vec<AxisSpec>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Filter function of a noise channel and its overlap infidelity.
    FilterFunction {
        config: PathBuf,
        #[command(flatten)]
        pulse: PulseArg,
        #[arg(long)]
        noise: Option<String>,
        #[arg(long, value_parser = parse_quantity_arg)]
        omega_low: Option<f64>,
        #[arg(long, value_parser = parse_quantity_arg)]
        omega_high: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long, default_value = "filter_function.csv")]
        out: PathBuf,
    },
    /// Compare the analytic gradient with central finite differences.
    GradCheck {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, default_value_t = 1e-6)]
        rel_step: f64,
    },
}

fn parse_axis_arg(s: &str) -> Result<AxisSpec, String> {
    parse_axis(s).map_err(|e| e.to_string())
}

fn parse_quantity_arg(s: &str) -> Result<f64, String> {
    parse_quantity(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<i32, String> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    }
    let r = match cli.command {
        Command::Optimize { config, out, seed } => cmd_optimize(&OptimizeArgs { config, out, seed }),
        Command::Evaluate { config, pulse, out, seed, realizations, noiseless } => {
            cmd_evaluate(&EvaluateArgs { config, pulse: pulse.source()?, out, seed, realizations, noiseless })
        }
        Command::Sweep { config, pulse, axes, out } => cmd_sweep(&SweepArgs { config, pulse: pulse.source()?, axes, out }),
        Command::FilterFunction { config, pulse, noise, omega_low, omega_high, points, out } => {
            cmd_filter_function(&FilterArgs { config, pulse: pulse.source()?, noise, omega_low, omega_high, points, out })
        }
        Command::GradCheck { config, tol, samples, seed, mode, rel_step } => cmd_grad_check(&GradCheckArgs {
            config,
            tol,
            samples,
            seed,
            mode: mode.map(|m| match m {
                Mode::Exact => GradientMode::Exact,
                Mode::FirstOrder => GradientMode::FirstOrder,
            }),
            rel_step,
        }),
    };
    r.map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
