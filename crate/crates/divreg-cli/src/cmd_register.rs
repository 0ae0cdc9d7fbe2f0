//! `divreg register`: run a trained network on one image pair, writing the
//! warped image, the displacement field, and (when labels are given) the
//! overlap and surface metrics before and after.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use divreg_core::autodiff::{peek_checkpoint, Scalar};
use divreg_core::image::{load_image, load_labels, save_image};
use divreg_core::metrics::{evaluate_labels, mean_foreground_dice};
use divreg_core::regnet::{predict_flow, RegNetConfig, RegNetParams};
use divreg_core::train::load_params;
use divreg_core::transform::{save_field, warp_image, warp_labels};
use divreg_core::{DisplacementField, Image, LabelMap};

use crate::manifest::RunManifest;
use crate::Common;

pub const MOVED: &str = "moved.mha";
pub const FIELD: &str = "field.mha";
pub const METRICS: &str = "metrics.json";

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    common: Common,
    /// Network checkpoint (typically the averaged regnet_ema.ckpt)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Moving image (.mha)
    #[arg(long)]
    moving: PathBuf,
    /// Fixed image (.mha)
    #[arg(long)]
    fixed: PathBuf,
    /// Moving label map; enables the metrics report
    #[arg(long)]
    moving_labels: Option<PathBuf>,
    /// Fixed label map; enables the metrics report
    #[arg(long)]
    fixed_labels: Option<PathBuf>,
}

/// Pull the network shape out of a training checkpoint's config echo.
pub fn regnet_config_from_meta(meta: &serde_json::Value) -> Result<RegNetConfig> {
    let cfg = meta
        .pointer("/config/train/regnet")
        .ok_or_else(|| anyhow::anyhow!("checkpoint lacks the network config echo"))?;
    serde_json::from_value(cfg.clone()).context("decoding network config from checkpoint")
}

/// Load a registration network from a training checkpoint, choosing the
/// scalar type the file was written with.
pub fn load_regnet(path: &Path) -> Result<LoadedRegNet> {
    let (dtype, meta) = peek_checkpoint(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let cfg = regnet_config_from_meta(&meta)?;
    Ok(match dtype.as_str() {
        "f32" => {
            let mut params = RegNetParams::<f32>::init(&cfg, 0)?;
            load_params(path, &mut params, None)?;
            LoadedRegNet::F32(params)
        }
        "f64" => {
            let mut params = RegNetParams::<f64>::init(&cfg, 0)?;
            load_params(path, &mut params, None)?;
            LoadedRegNet::F64(params)
        }
        other => bail!("unsupported checkpoint dtype {other}"),
    })
}

pub enum LoadedRegNet {
    F32(RegNetParams<f32>),
    F64(RegNetParams<f64>),
}

impl LoadedRegNet {
    pub fn dtype(&self) -> &'static str {
        match self {
            LoadedRegNet::F32(_) => f32::DTYPE,
            LoadedRegNet::F64(_) => f64::DTYPE,
        }
    }

    pub fn predict(&self, moving: &Image, fixed: &Image) -> divreg_core::Result<DisplacementField> {
        match self {
            LoadedRegNet::F32(p) => predict_flow(p, moving, fixed),
            LoadedRegNet::F64(p) => predict_flow(p, moving, fixed),
        }
    }
}

/// Per-pair label metrics, before and after applying a field.
pub fn label_report(
    moving_labels: &LabelMap,
    fixed_labels: &LabelMap,
    field: &DisplacementField,
) -> Result<serde_json::Value> {
    let warped = warp_labels(moving_labels, field)?;
    let before = mean_foreground_dice(moving_labels, fixed_labels)?;
    let after = mean_foreground_dice(&warped, fixed_labels)?;
    let per_class = evaluate_labels(&warped, fixed_labels)?;
    let classes: Vec<serde_json::Value> = per_class
        .iter()
        .map(|c| {
            json!({
                "class": c.class,
                "dice": c.dice,
                "asd": c.surface.as_ref().map(|s| s.asd),
                "hausdorff": c.surface.as_ref().map(|s| s.hausdorff),
                "hausdorff95": c.surface.as_ref().map(|s| s.hausdorff95),
            })
        })
        .collect();
    Ok(json!({
        "dice_before": before,
        "dice_after": after,
        "classes": classes,
    }))
}

pub fn run(args: Args) -> Result<()> {
    if args.moving_labels.is_some() != args.fixed_labels.is_some() {
        bail!("--moving-labels and --fixed-labels must be given together");
    }
    let net = load_regnet(&args.checkpoint)?;
    let moving = load_image(&args.moving)?;
    let fixed = load_image(&args.fixed)?;

    let seed = args.common.seed.unwrap_or(0);
    let manifest = RunManifest::start(
        "register",
        seed,
        net.dtype(),
        json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "moving": args.moving.display().to_string(),
            "fixed": args.fixed.display().to_string(),
        }),
    );

    let field = net.predict(&moving, &fixed)?;
    let moved = warp_image(&moving, &field)?;
    let out = &args.common.out;
    save_image(&moved, &out.join(MOVED))?;
    save_field(&field, &out.join(FIELD))?;
    let mut outputs = vec![MOVED.to_string(), FIELD.to_string()];

    let mut summary = json!({
        "mean_abs_displacement": field.mean_abs(),
    });
    if let (Some(ml), Some(fl)) = (&args.moving_labels, &args.fixed_labels) {
        let moving_labels = load_labels(ml)?;
        let fixed_labels = load_labels(fl)?;
        let report = label_report(&moving_labels, &fixed_labels, &field)?;
        std::fs::write(
            out.join(METRICS),
            serde_json::to_string_pretty(&report)?,
        )?;
        outputs.push(METRICS.to_string());
        summary["dice_before"] = report["dice_before"].clone();
        summary["dice_after"] = report["dice_after"].clone();
    }

    manifest.finish(out, outputs, summary)?;
    Ok(())
}
