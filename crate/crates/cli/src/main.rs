use std::path::PathBuf;
use std::process::ExitCode;

use catpol::config::{ConfigError, EstlabConfig, RunConfig, SweepConfig};
use catpol::experiments::{
    self, estlab_grid, evaluate_checkpoint, read_text, resolve_output_dir, sweep, train_runs, ExperimentError,
};
use clap::{Parser, Subcommand};

/// Train and analyse categorical mode policies on toy control tasks.
#[derive(Debug, Parser)]
#[command(name = "catpol", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured seed; writes metrics, checkpoints and a summary.
    Train { config: PathBuf },
    /// Evaluate a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Sample modes and actions instead of acting greedily.
        #[arg(long)]
        stochastic: bool,
    },
    /// Measure gradient estimator bias and variance over a grid.
    Estlab { config: PathBuf },
    /// Train a grid of mode layouts.
    Sweep { config: PathBuf },
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::parse(&read_text(&config)?)?;
            let out = resolve_output_dir(&cfg.output_dir);
            let s = train_runs(&cfg, &out)?;
            for r in &s.runs {
                println!("seed {}: final return {}", r.seed, r.final_return);
            }
            println!(
                "final return {} ± {} over {} seeds",
                s.final_return_mean,
                s.final_return_std,
                s.seeds.len()
            );
            println!("wrote {}", out.join(experiments::AGGREGATE_JSON).display());
        }
        Command::Eval {
            checkpoint,
            episodes,
            stochastic,
        } => {
            if episodes == 0 {
                return Err(ConfigError::Value {
                    key: "episodes".into(),
                    msg: "must be at least 1".into(),
                }
                .into());
            }
            print!("{}", evaluate_checkpoint(&checkpoint, episodes, stochastic)?.render());
        }
        Command::Estlab { config } => {
            let cfg = EstlabConfig::parse(&read_text(&config)?)?;
            let out = resolve_output_dir(&cfg.output_dir);
            let rows = estlab_grid(&cfg, &out)?;
            for r in &rows {
                println!(
                    "seed {} {} t={}: bias {} variance {} se {}",
                    r.seed, r.method, r.temperature, r.bias_norm, r.variance_trace, r.std_error_norm
                );
            }
            println!("wrote {}", out.join(experiments::ESTLAB_CSV).display());
        }
        Command::Sweep { config } => {
            let cfg = SweepConfig::parse(&read_text(&config)?)?;
            let out = resolve_output_dir(&cfg.run.output_dir);
            let s = sweep(&cfg, &out)?;
            for c in &s.cells {
                println!(
                    "{}: final return {} ± {}",
                    c.cell, c.final_return_mean, c.final_return_std
                );
            }
            println!("wrote {}", out.join(experiments::SWEEP_CSV).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
