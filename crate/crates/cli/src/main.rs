use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdkoopman::experiment::{cmd_control, cmd_predict, cmd_sim, cmd_train};
use tdkoopman::{Error, ExperimentConfig};

/// Delay-embedded Koopman models and history LQR for periodic hybrid systems.
#[derive(Parser)]
#[command(name = "tdkoop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the nominal orbit; writes trajectory.csv and orbit.csv.
    Sim(Common),
    /// Fit the delay-embedded model; writes model.tdkm and train_report.csv.
    Train(Common),
    /// Open-loop rollout against the truth; writes prediction.csv and prediction_rmse.csv.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Model file written by `train` (default: <out>/model.tdkm).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Closed-loop tracking with the history LQR; writes closed_loop.csv and tracking reports.
    Control {
        #[command(flatten)]
        common: Common,
        /// Model file written by `train` (default: <out>/model.tdkm).
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn model_path(cfg: &ExperimentConfig, common: &Common, model: Option<PathBuf>) -> PathBuf {
    model.unwrap_or_else(|| {
        common
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
            .join("model.tdkm")
    })
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Error> {
    let load = |c: &Common| ExperimentConfig::load(&c.config);
    match cli.command {
        Command::Sim(c) => cmd_sim(&load(&c)?, c.out.as_deref()),
        Command::Train(c) => cmd_train(&load(&c)?, c.out.as_deref()),
        Command::Predict { common, model } => {
            let cfg = load(&common)?;
            let path = model_path(&cfg, &common, model);
            cmd_predict(&cfg, &path, common.out.as_deref())
        }
        Command::Control { common, model } => {
            let cfg = load(&common)?;
            let path = model_path(&cfg, &common, model);
            cmd_control(&cfg, &path, common.out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in &files {
                println!("wrote {}", Path::new(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
