//! Command-line entry point: train / eval / sweep / validate.

use clap::{Args, Parser, Subcommand};
use d3pg::error::Error;
use d3pg::harness::{
    cmd_eval, cmd_sweep, cmd_train, cmd_validate, Algorithm, ExperimentConfig, Overrides,
    SweepAxis,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "d3pg",
    about = "Diffusion-policy contention control for a slotted CSMA/CA simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// experiment config file (TOML); omit to use built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// comma-separated run seeds, overriding the config
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// output directory, overriding the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// algorithm, overriding the config
    #[arg(long, value_parser = parse_algo)]
    algo: Option<Algorithm>,
    /// number of stations, overriding the scenario
    #[arg(long)]
    stas: Option<usize>,
    /// denoising chain length, overriding the agent settings
    #[arg(long)]
    denoise_steps: Option<usize>,
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl CommonOpts {
    fn overrides(&self) -> Overrides {
        Overrides {
            seeds: self.seeds.clone(),
            out_dir: self.out.clone(),
            algo: self.algo,
            stas: self.stas,
            denoise_steps: self.denoise_steps,
        }
    }

    fn load(&self) -> Result<ExperimentConfig, Error> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured algorithm on every seed and write logs + checkpoints
    Train {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate trained checkpoints (or the static baseline) with exploration off
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// training output directory holding seed-*/checkpoints/final
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train + evaluate across an axis of scenario or agent values
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// sweep axis: stas | denoise_steps
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        /// comma-separated axis values
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
    },
    /// Check simulated collision probabilities against the analytic fixed point
    Validate {
        #[command(flatten)]
        common: CommonOpts,
        /// comma-separated station counts to check
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        stas_list: Vec<usize>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { common } => {
            let config = common.load()?;
            let artifacts = cmd_train(&config)?;
            println!(
                "trained {} seed(s); logs under {}",
                config.seeds.len(),
                artifacts.out_dir.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let config = common.load()?;
            let artifacts = cmd_eval(&config, checkpoint.as_deref())?;
            if let Some(path) = artifacts.eval_summary {
                println!("evaluation summary written to {}", path.display());
            }
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let config = common.load()?;
            let artifacts = cmd_sweep(&config, axis, &values)?;
            if let Some(path) = artifacts.eval_summary {
                println!("sweep results written to {}", path.display());
            }
        }
        Command::Validate { common, stas_list } => {
            let config = common.load()?;
            let path = cmd_validate(&config, &stas_list)?;
            println!("validation table written to {}", path.display());
        }
    }
    Ok(())
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
