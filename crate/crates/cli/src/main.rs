use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use perfusion_cli::commands::AssimilateArgs;
use perfusion_cli::{cmd_assimilate, cmd_phantom, cmd_study, CliError};

#[derive(Parser)]
#[command(name = "perfusion-enkf", version, about = "Ensemble Kalman filter perfusion reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file
    Phantom {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assimilate every voxel of a dataset
    Assimilate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the per-observation mean history
        #[arg(long)]
        history: bool,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run a parameter study on a single phantom voxel
    Study {
        /// ensemble_size, dtau, corr_length, dt_obs or noise
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Phantom { spec, out } => cmd_phantom(spec, out),
        Command::Assimilate {
            data,
            config,
            out,
            history,
            jobs,
        } => cmd_assimilate(AssimilateArgs {
            data: data.as_deref(),
            config,
            out: out.as_deref(),
            history: *history,
            jobs: *jobs,
        }),
        Command::Study {
            kind,
            config,
            out,
            seeds,
        } => cmd_study(kind.as_deref(), config, out.as_deref(), *seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
