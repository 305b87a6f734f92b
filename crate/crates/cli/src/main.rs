use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use cotta_cli::commands::{self, SweepParam};
use cotta_cli::{ExperimentConfig, Result};

/// Continual test-time adaptation experiments on a synthetic drift benchmark.
///
/// Exit codes: 0 success, 1 runtime failure, 2 configuration error.
/// `COTTA_SEED` overrides every seed in the config.
#[derive(Parser)]
#[command(name = "cotta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model on clean glyphs and write a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configured method over the target stream.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory [default: output.dir from the config]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run CoTTA once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// alpha, p_th, restore_p or n_aug
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// Output CSV [default: <output.dir>/sweep_<param>.csv]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the comparison table of an adapt output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let t0 = Instant::now();
            let outcome = commands::pretrain(&cfg, &out)?;
            let losses = &outcome.report.epoch_losses;
            println!(
                "pretrained {} for {} epochs in {:.1} s (final train loss {:.4})",
                cfg.model.architecture,
                losses.len(),
                t0.elapsed().as_secs_f64(),
                losses.last().copied().unwrap_or(f32::NAN)
            );
            println!("clean test error: {:.4}", outcome.report.test_error);
            println!("checkpoint: {}", out.display());
        }
        Command::Adapt { config, ckpt, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let outcome = commands::adapt(&cfg, &ckpt, &dir, |line| eprintln!("{line}"))?;
            print!("{}", outcome.table);
            println!("results: {}", dir.display());
        }
        Command::Sweep { config, ckpt, param, values, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let param = SweepParam::parse(&param)?;
            let path = out.unwrap_or_else(|| commands::default_sweep_path(&cfg, param));
            let rows = commands::sweep(&cfg, &ckpt, param, &values, &path)?;
            println!("{:>10}  mean_error", param.name());
            for (v, e) in rows {
                println!("{v:>10}  {e:.4}");
            }
            println!("sweep: {}", path.display());
        }
        Command::Report { dir } => print!("{}", commands::report(&dir)?),
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
