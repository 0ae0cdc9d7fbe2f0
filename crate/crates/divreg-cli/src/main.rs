//! `divreg`: reproducible registration experiments from the command line.
//!
//! Every command reads an optional JSON config (explicit flags win), runs
//! deterministically for a given (config, seed), and writes its artifacts
//! plus one `manifest.json` describing exactly what ran.

mod cmd_estimate_kl;
mod cmd_evaluate;
mod cmd_gen_phantom;
mod cmd_landscape;
mod cmd_register;
mod cmd_train;
mod dataset;
mod manifest;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "divreg",
    version,
    about = "Deformable registration experiments: synthetic data, training, inference, evaluation, similarity sweeps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic image pairs with known deformations
    GenPhantom(cmd_gen_phantom::Args),
    /// Train the registration network
    Train(cmd_train::Args),
    /// Apply a trained network to one image pair
    Register(cmd_register::Args),
    /// Score registrations over a dataset split
    Evaluate(cmd_evaluate::Args),
    /// Sweep similarity scores over translations
    Landscape(cmd_landscape::Args),
    /// Estimate a KL divergence from two sample files
    EstimateKl(cmd_estimate_kl::Args),
}

/// Numeric precision of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Flags shared by every command.
#[derive(Debug, clap::Args)]
pub struct Common {
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base random seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,
    /// Numeric precision [default: f64]
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

impl Common {
    pub fn precision(&self) -> Precision {
        self.precision.unwrap_or(Precision::F64)
    }
}

/// Load a JSON config file, or the type's defaults when no file is given.
pub fn load_config<C>(path: Option<&Path>) -> Result<C>
where
    C: serde::de::DeserializeOwned + Default,
{
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Command::GenPhantom(a) => cmd_gen_phantom::run(a),
        Command::Train(a) => cmd_train::run(a),
        Command::Register(a) => cmd_register::run(a),
        Command::Evaluate(a) => cmd_evaluate::run(a),
        Command::Landscape(a) => cmd_landscape::run(a),
        Command::EstimateKl(a) => cmd_estimate_kl::run(a),
    }
}
