//! `divreg evaluate`: score a dataset split, unregistered and (with a
//! checkpoint) registered, writing per-pair and aggregate numbers.

use std::path::PathBuf;

use anyhow::{Context, Result};
use serde_json::json;

use divreg_core::image::{load_image, load_labels};
use divreg_core::metrics::mean_foreground_dice;
use divreg_core::transform::warp_labels;

use crate::cmd_register::{label_report, load_regnet};
use crate::dataset::{list_pairs, FIXED, FIXED_LABELS, MOVING, MOVING_LABELS};
use crate::manifest::RunManifest;
use crate::Common;

pub const REPORT: &str = "evaluation.json";

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    common: Common,
    /// Dataset root produced by gen-phantom
    #[arg(long)]
    data: PathBuf,
    /// Which split to score
    #[arg(long, default_value = "test")]
    split: String,
    /// Network checkpoint; without it only the unregistered baseline is scored
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn run(args: Args) -> Result<()> {
    let pairs = list_pairs(&args.data, &args.split)?;
    let net = args.checkpoint.as_deref().map(load_regnet).transpose()?;

    let seed = args.common.seed.unwrap_or(0);
    let precision = net
        .as_ref()
        .map(|n| n.dtype())
        .unwrap_or(args.common.precision().name());
    let manifest = RunManifest::start(
        "evaluate",
        seed,
        precision,
        json!({
            "data": args.data.display().to_string(),
            "split": args.split,
            "checkpoint": args.checkpoint.as_ref().map(|p| p.display().to_string()),
        }),
    );

    let mut baseline = Vec::with_capacity(pairs.len());
    let mut registered = Vec::with_capacity(pairs.len());
    let mut entries = Vec::with_capacity(pairs.len());
    for dir in &pairs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let moving_labels = load_labels(&dir.join(MOVING_LABELS))
            .with_context(|| format!("pair {name}"))?;
        let fixed_labels = load_labels(&dir.join(FIXED_LABELS))?;
        let before = mean_foreground_dice(&moving_labels, &fixed_labels)?;
        baseline.push(before);

        let mut entry = json!({ "pair": name, "dice_before": before });
        if let Some(net) = &net {
            let moving = load_image(&dir.join(MOVING))?;
            let fixed = load_image(&dir.join(FIXED))?;
            let field = net.predict(&moving, &fixed)?;
            let warped = warp_labels(&moving_labels, &field)?;
            let after = mean_foreground_dice(&warped, &fixed_labels)?;
            registered.push(after);
            let report = label_report(&moving_labels, &fixed_labels, &field)?;
            entry["dice_after"] = json!(after);
            entry["classes"] = report["classes"].clone();
        }
        entries.push(entry);
    }

    // Same accumulation as the generator's manifest, so the unregistered
    // mean here matches its test_identity_dice to the last bit.
    let baseline_mean = baseline.iter().sum::<f64>() / baseline.len() as f64;
    let (_, baseline_std) = mean_std(&baseline);
    let mut summary = json!({
        "pairs": pairs.len(),
        "dice_before_mean": baseline_mean,
        "dice_before_std": baseline_std,
    });
    if !registered.is_empty() {
        let (m, s) = mean_std(&registered);
        summary["dice_after_mean"] = json!(m);
        summary["dice_after_std"] = json!(s);
        summary["dice_improvement"] = json!(m - baseline_mean);
    }

    let report = json!({ "summary": summary, "pairs": entries });
    std::fs::create_dir_all(&args.common.out)?;
    std::fs::write(
        args.common.out.join(REPORT),
        serde_json::to_string_pretty(&report)?,
    )?;
    manifest.finish(&args.common.out, vec![REPORT.to_string()], summary)?;
    Ok(())
}
