//! `divreg landscape`: probe similarity scores over a grid of integer
//! translations of one image pair, one sweep per requested metric.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Result};
use serde_json::json;

use divreg_core::image::load_image;
use divreg_core::landscape::{sweep_translations, SweepConfig, SweepTable};
use divreg_core::similarity::MetricKind;

use crate::manifest::RunManifest;
use crate::{load_config, Common};

pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    common: Common,
    /// Moving image (.mha)
    #[arg(long)]
    moving: PathBuf,
    /// Fixed image (.mha)
    #[arg(long)]
    fixed: PathBuf,
    /// Comma-separated metrics to sweep
    #[arg(long, default_value = "lncc,mi,dv")]
    metrics: String,
    /// Largest probed offset along each axis, voxels
    #[arg(long)]
    max_offset: Option<usize>,
    /// Grid step, voxels
    #[arg(long)]
    step: Option<usize>,
}

fn parse_metrics(list: &str) -> Result<Vec<MetricKind>> {
    let mut metrics = Vec::new();
    for part in list.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        metrics.push(
            part.parse::<MetricKind>()
                .map_err(|e| anyhow::anyhow!("{e}; allowed: ssd, lncc, mi, dv"))?,
        );
    }
    if metrics.is_empty() {
        bail!("--metrics named no metric");
    }
    Ok(metrics)
}

/// All sweeps in one table, keyed by a leading metric column.
fn combined_csv(tables: &[SweepTable]) -> String {
    let rank = tables
        .first()
        .and_then(|t| t.points.first())
        .map_or(0, |p| p.offset.len());
    let mut out = String::from("metric,");
    for a in 0..rank {
        let _ = write!(out, "offset_{a},");
    }
    out.push_str("score\n");
    for table in tables {
        for p in &table.points {
            let _ = write!(out, "{},", table.metric);
            for o in &p.offset {
                let _ = write!(out, "{o},");
            }
            let _ = writeln!(out, "{}", p.score);
        }
    }
    out
}

pub fn run(args: Args) -> Result<()> {
    let metrics = parse_metrics(&args.metrics)?;
    let mut cfg: SweepConfig = load_config(args.common.config.as_deref())?;
    if let Some(m) = args.max_offset {
        cfg.max_offset = m;
    }
    if let Some(s) = args.step {
        cfg.step = s;
    }
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }

    let moving = load_image(&args.moving)?;
    let fixed = load_image(&args.fixed)?;

    let manifest = RunManifest::start(
        "landscape",
        cfg.seed,
        args.common.precision().name(),
        json!({
            "moving": args.moving.display().to_string(),
            "fixed": args.fixed.display().to_string(),
            "metrics": metrics.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
            "sweep": serde_json::to_value(&cfg)?,
        }),
    );

    let mut tables = Vec::with_capacity(metrics.len());
    let mut per_metric = serde_json::Map::new();
    for metric in metrics {
        let mut mc = cfg.clone();
        mc.metric = metric;
        let table = sweep_translations(&moving, &fixed, &mc)?;
        per_metric.insert(
            metric.to_string(),
            json!({
                "argmax": table.argmax().offset,
                "peak_score": table.argmax().score,
                "peak_error": table.peak_error(),
                "points": table.points.len(),
            }),
        );
        tables.push(table);
    }

    std::fs::create_dir_all(&args.common.out)?;
    std::fs::write(args.common.out.join(SWEEP_CSV), combined_csv(&tables))?;
    manifest.finish(
        &args.common.out,
        vec![SWEEP_CSV.to_string()],
        serde_json::Value::Object(per_metric),
    )?;
    Ok(())
}
