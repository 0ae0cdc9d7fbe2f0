//! `divreg estimate-kl`: fit a scorer to two sample files and report the
//! divergence bound between their distributions, in nats.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use divreg_core::kldivnet::{estimate_kl, KlEstimateOptions, SampleSet};

use crate::manifest::RunManifest;
use crate::{load_config, Common};

pub const ESTIMATE: &str = "estimate.json";

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    common: Common,
    /// CSV of samples from the first distribution, one vector per row
    #[arg(long)]
    mu: PathBuf,
    /// CSV of samples from the second distribution, one vector per row
    #[arg(long)]
    lambda: PathBuf,
}

/// Parse a headerless CSV of floats, one sample vector per row.
pub fn load_samples(path: &Path) -> Result<SampleSet> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading samples from {}", path.display()))?;
    let mut dim = None;
    let mut data = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => bail!(
                "{}:{}: row has {} values, earlier rows had {d}",
                path.display(),
                lineno + 1,
                row.len()
            ),
            _ => {}
        }
        data.extend(row);
    }
    let dim = dim.ok_or_else(|| anyhow::anyhow!("{} holds no samples", path.display()))?;
    SampleSet::new(dim, data).map_err(Into::into)
}

pub fn run(args: Args) -> Result<()> {
    let mut opts: KlEstimateOptions = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        opts.seed = seed;
    }
    let mu = load_samples(&args.mu)?;
    let lam = load_samples(&args.lambda)?;

    // The scorer always runs in f64; sample files carry no dtype of their own.
    let manifest = RunManifest::start(
        "estimate-kl",
        opts.seed,
        "f64",
        json!({
            "mu": args.mu.display().to_string(),
            "lambda": args.lambda.display().to_string(),
            "options": serde_json::to_value(&opts)?,
        }),
    );

    let estimate = estimate_kl(&mu, &lam, &opts)?;
    let report = json!({
        "nats": estimate.nats,
        "history": estimate.history,
    });
    std::fs::create_dir_all(&args.common.out)?;
    std::fs::write(
        args.common.out.join(ESTIMATE),
        serde_json::to_string_pretty(&report)?,
    )?;
    manifest.finish(
        &args.common.out,
        vec![ESTIMATE.to_string()],
        json!({
            "nats": estimate.nats,
            "mu_samples": mu.len(),
            "lambda_samples": lam.len(),
        }),
    )?;
    Ok(())
}
