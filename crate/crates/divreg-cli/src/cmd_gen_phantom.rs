//! `divreg gen-phantom`: synthesize a dataset of deformed image pairs with
//! labels and generating truth fields, split into train/val/test.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use divreg_core::image::{save_image, save_labels};
use divreg_core::metrics::mean_foreground_dice;
use divreg_core::phantom::{generate_pair, PhantomConfig, Remap};
use divreg_core::transform::save_field;

use crate::dataset::{
    split_sizes, FIXED, FIXED_LABELS, MOVING, MOVING_LABELS, SPLITS, TRUTH_FIELD,
};
use crate::manifest::RunManifest;
use crate::{load_config, Common};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub count: usize,
    /// Relative shares of the train/val/test splits.
    pub split: [usize; 3],
    pub phantom: PhantomConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 250,
            split: [150, 50, 50],
            phantom: PhantomConfig::default(),
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    common: Common,
    /// Number of pairs to generate
    #[arg(long)]
    count: Option<usize>,
    /// Intensity remap of the moving image: identity | inverting_fold
    #[arg(long)]
    remap: Option<String>,
    /// Grid extents, e.g. 64x64
    #[arg(long)]
    dims: Option<String>,
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad --dims '{s}'; expected like 64x64"))?;
    if dims.is_empty() {
        bail!("bad --dims '{s}'");
    }
    Ok(dims)
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg: GenConfig = load_config(args.common.config.as_deref())?;
    if let Some(c) = args.count {
        cfg.count = c;
    }
    if let Some(r) = &args.remap {
        cfg.phantom.remap = r
            .parse::<Remap>()
            .map_err(|e| anyhow::anyhow!("{e}; allowed: identity, inverting_fold"))?;
    }
    if let Some(d) = &args.dims {
        cfg.phantom.dims = parse_dims(d)?;
    }
    if cfg.count == 0 {
        bail!("--count must be positive");
    }
    let seed = args.common.seed.unwrap_or(0);
    let precision = args.common.precision();
    let manifest = RunManifest::start(
        "gen-phantom",
        seed,
        precision.name(),
        serde_json::to_value(&cfg)?,
    );

    let sizes = split_sizes(cfg.count, cfg.split)?;
    let out = &args.common.out;
    let mut index = 0usize;
    let mut test_dice = Vec::new();
    for (split, &size) in SPLITS.iter().zip(sizes.iter()) {
        for _ in 0..size {
            let pair = generate_pair(&cfg.phantom, seed.wrapping_add(index as u64))?;
            let dir = out.join(split).join(format!("pair_{index:03}"));
            write_pair(&dir, &pair)?;
            if *split == "test" {
                test_dice.push(mean_foreground_dice(
                    &pair.moving_labels,
                    &pair.fixed_labels,
                )?);
            }
            index += 1;
        }
    }

    let test_identity_dice = if test_dice.is_empty() {
        serde_json::Value::Null
    } else {
        json!(test_dice.iter().sum::<f64>() / test_dice.len() as f64)
    };
    let outputs: Vec<String> = SPLITS
        .iter()
        .zip(sizes.iter())
        .filter(|(_, &s)| s > 0)
        .map(|(name, _)| name.to_string())
        .collect();
    manifest.finish(
        out,
        outputs,
        json!({
            "counts": { "train": sizes[0], "val": sizes[1], "test": sizes[2] },
            "test_identity_dice": test_identity_dice,
        }),
    )?;
    Ok(())
}

fn write_pair(dir: &Path, pair: &divreg_core::phantom::PhantomPair) -> Result<()> {
    save_image(&pair.moving, &dir.join(MOVING))?;
    save_image(&pair.fixed, &dir.join(FIXED))?;
    save_labels(&pair.moving_labels, &dir.join(MOVING_LABELS))?;
    save_labels(&pair.fixed_labels, &dir.join(FIXED_LABELS))?;
    save_field(&pair.truth, &dir.join(TRUTH_FIELD))?;
    Ok(())
}
