use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use semi_llie::{commands, fit};

#[derive(Parser)]
#[command(version, about = "Semi-supervised low-light image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file on a dataset root.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory for checkpoints and the loss history.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Enhance every image of a directory.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Use the student weights instead of the teacher.
        #[arg(long)]
        student: bool,
    },
    /// Score a checkpoint on the val and test splits.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "psnr,ssim,loe")]
        metrics: String,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            data,
            resume,
            out,
        } => {
            let s = commands::train(&config, &data, &out, resume, fit::deterministic_from_env())
                .context("training failed")?;
            log::info!("finished at step {}", s.final_step);
        }
        Command::Enhance {
            ckpt,
            input,
            output,
            student,
        } => {
            let n = commands::enhance(&ckpt, &input, &output, student)?.len();
            log::info!("wrote {n} images to {}", output.display());
        }
        Command::Evaluate {
            ckpt,
            data,
            metrics,
        } => {
            let metrics = commands::parse_metrics(&metrics)?;
            print!("{}", commands::evaluate(&ckpt, &data, &metrics)?.render());
        }
    }
    Ok(())
}
