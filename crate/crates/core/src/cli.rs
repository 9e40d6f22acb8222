//! Command-line entry point (minimal bootstrap; full command set lands
//! with the analysis modules).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use crate::model::ModelConfig;
use crate::tasks::generate;
use crate::train::{train, RunStatus, TrainConfig};

#[derive(Parser)]
#[command(name = "grokbench", version, about = "grokking reconstruction workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config file's weight decay.
        #[arg(long)]
        wd: Option<f64>,
        /// Override the config file's max step count.
        #[arg(long)]
        max_steps: Option<u64>,
    },
}

#[derive(Debug, Deserialize)]
struct FileConfig {
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn run() -> anyhow::Result<i32> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            out,
            wd,
            max_steps,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut file_cfg: FileConfig = toml::from_str(&text)?;
            if let Some(wd) = wd {
                file_cfg.train.weight_decay = wd;
            }
            if let Some(ms) = max_steps {
                file_cfg.train.max_steps = ms;
            }
            let (train_ds, test_ds) =
                generate(file_cfg.model.p as u32, file_cfg.train.split_seed)?;
            let record = train(&file_cfg.model, &file_cfg.train, &train_ds, &test_ds, &out)?;
            eprintln!(
                "run finished: status {:?}, final step {}, grok step {:?}",
                record.status, record.final_step, record.grok_step
            );
            Ok(if record.status == RunStatus::Diverged {
                1
            } else {
                0
            })
        }
    }
}

pub fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
