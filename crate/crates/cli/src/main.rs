mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use critembed::network::{Activation, HessianMode};

use commands::{Global, VerifyTolerances};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "critembed",
    version,
    about = "Critical-point embeddings for fully connected networks"
)]
struct Cli {
    /// Experiment configuration (train, two-stage).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the command's main tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Output directory [default: the config's output_dir, else ./out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a configuration file.
    Train,
    /// Apply an embedding spec to narrow parameters.
    Embed {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Check that a wide network is an embedding of a narrow one.
    Verify {
        #[arg(long)]
        narrow: PathBuf,
        #[arg(long)]
        wide: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        output_tol: f64,
        #[arg(long, default_value_t = 1e-8)]
        representation_tol: f64,
        /// The narrow point counts as critical below this gradient norm.
        #[arg(long, default_value_t = 1e-6)]
        critical_tol: f64,
        #[arg(long, default_value_t = 1e-6)]
        criticality_tol: f64,
        #[arg(long, default_value_t = 1e-8)]
        trace_tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        pullback_tol: f64,
    },
    /// Hessian spectrum, inertia and the H1/H2 split at a point.
    Hessian {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "analytic-h1-fd")]
        mode: ModeArg,
        /// Include the full H, H1 and H2 matrices in the report.
        #[arg(long)]
        matrices: bool,
    },
    /// Screen a critical point and build a strict-saddle witness when possible.
    Saddle {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        h2_tol: f64,
    },
    /// Measure the degrees of freedom of compatible embeddings for an index map.
    Dof {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value = "tanh")]
        activation: Activation,
    },
    /// Wide training run compared against narrow critical points.
    TwoStage,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    AnalyticH1Fd,
    FullFd,
}

impl From<ModeArg> for HessianMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AnalyticH1Fd => HessianMode::AnalyticH1Fd,
            ModeArg::FullFd => HessianMode::FullFd,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = Global {
        config: cli.config,
        seed: cli.seed,
        tol: cli.tol,
        out: cli.out,
    };
    match cli.command {
        Command::Train => commands::train(&g),
        Command::Embed { params, spec, data } => commands::embed(&g, &params, &spec, &data),
        Command::Verify {
            narrow,
            wide,
            spec,
            data,
            output_tol,
            representation_tol,
            critical_tol,
            criticality_tol,
            trace_tol,
            pullback_tol,
        } => {
            let tol = VerifyTolerances {
                output: g.tol.unwrap_or(output_tol),
                representation: representation_tol,
                critical: critical_tol,
                criticality: criticality_tol,
                trace: trace_tol,
                pullback: pullback_tol,
            };
            commands::verify(&g, &narrow, wide.as_deref(), spec.as_deref(), &data, &tol)
        }
        Command::Hessian {
            params,
            data,
            mode,
            matrices,
        } => commands::hessian(&g, &params, &data, mode.into(), matrices),
        Command::Saddle {
            params,
            data,
            h2_tol,
        } => commands::saddle(&g, &params, &data, g.tol.unwrap_or(h2_tol)),
        Command::Dof {
            map,
            seeds,
            activation,
        } => commands::dof(&g, &map, seeds, activation),
        Command::TwoStage => commands::two_stage(&g),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
