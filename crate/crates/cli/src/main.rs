//! Pipeline driver: simulate -> train -> calibrate -> evaluate -> pdf,
//! all reproduced from one config file plus a seed.

mod config;
mod pipeline;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "qucal",
    about = "Quantile-conditioned image regression with conformal calibration",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML with dotted keys).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        std::fs::create_dir_all(&cfg.out_dir)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset and manifest.
    Simulate(CommonArgs),
    /// Train the quantile model on the train split.
    Train(CommonArgs),
    /// Calibrate quantile bounds on the calibration split.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Also calibrate the constant-scaling baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Evaluate the calibrated model on the validation split.
    Evaluate(CommonArgs),
    /// Export per-pixel density estimates.
    Pdf {
        #[command(flatten)]
        common: CommonArgs,
        /// Extra pixel to export, as row,col. Repeatable.
        #[arg(long = "pixel", value_parser = parse_pixel)]
        pixels: Vec<(usize, usize)>,
        /// Replace the model with the analytic Gaussian quantile oracle.
        #[arg(long)]
        oracle_mode: bool,
    },
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected row,col, got {:?}", s));
    }
    let r = parts[0].trim().parse().map_err(|e| format!("bad row: {}", e))?;
    let c = parts[1].trim().parse().map_err(|e| format!("bad col: {}", e))?;
    Ok((r, c))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(common) => pipeline::cmd_simulate(&common.load()?),
        Command::Train(common) => pipeline::cmd_train(&common.load()?),
        Command::Calibrate { common, baseline } => {
            pipeline::cmd_calibrate(&common.load()?, baseline)
        }
        Command::Evaluate(common) => pipeline::cmd_evaluate(&common.load()?),
        Command::Pdf {
            common,
            pixels,
            oracle_mode,
        } => pipeline::cmd_pdf(&common.load()?, &pixels, oracle_mode),
    }
}
