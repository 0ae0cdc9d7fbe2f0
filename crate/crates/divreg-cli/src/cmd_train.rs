//! `divreg train`: fit the registration network on stored pairs or on
//! freshly synthesized phantoms, with checkpointed resume.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use divreg_core::autodiff::{peek_checkpoint, Scalar};
use divreg_core::kldivnet::KldivNetParams;
use divreg_core::phantom::PhantomConfig;
use divreg_core::regnet::RegNetParams;
use divreg_core::similarity::MetricKind;
use divreg_core::train::{
    load_params, resume_training, save_params, AdamState, PairSource, PhantomSource, TrainConfig,
    TrainState, TrainedRegistration,
};

use crate::dataset::DirectorySource;
use crate::manifest::RunManifest;
use crate::{load_config, Common, Precision};

pub const LIVE_CKPT: &str = "regnet_live.ckpt";
pub const EMA_CKPT: &str = "regnet_ema.ckpt";
pub const ESTIMATOR_CKPT: &str = "estimator.ckpt";
pub const HISTORY_CSV: &str = "history.csv";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCmdConfig {
    pub train: TrainConfig,
    /// Pair synthesis settings, used when no dataset directory is given.
    pub phantom: PhantomConfig,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    common: Common,
    /// Dataset directory from gen-phantom; its train split feeds training.
    /// Without it, pairs are synthesized on the fly.
    #[arg(long)]
    data: Option<std::path::PathBuf>,
    /// Similarity to train against: dv | mi | lncc | ssd
    #[arg(long)]
    loss: Option<String>,
    /// Total iterations (a resumed run continues up to this count)
    #[arg(long)]
    iterations: Option<usize>,
    /// Directory holding checkpoints of the run to continue
    #[arg(long)]
    resume: Option<std::path::PathBuf>,
}

/// Collect everything wrong with a config instead of failing at the first
/// issue, so one round trip fixes them all.
fn validation_errors(cfg: &TrainCmdConfig, synthetic: bool) -> Vec<String> {
    let mut errs = Vec::new();
    let t = &cfg.train;
    if t.iterations == 0 {
        errs.push("iterations must be positive".into());
    }
    if t.batch == 0 {
        errs.push("batch must be positive".into());
    }
    if !(t.lr.is_finite() && t.lr > 0.0) {
        errs.push("lr must be positive".into());
    }
    if t.metric == MetricKind::Dv && !(t.estimator_lr.is_finite() && t.estimator_lr > 0.0) {
        errs.push("estimator_lr must be positive".into());
    }
    if !(0.0..1.0).contains(&t.ema_decay) {
        errs.push("ema_decay must lie in [0, 1)".into());
    }
    if !(t.smooth_weight.is_finite() && t.smooth_weight >= 0.0) {
        errs.push("smooth_weight must be non-negative".into());
    }
    if synthetic {
        let down = 1usize << t.regnet.enc_channels.len();
        for &d in &cfg.phantom.dims {
            if d % down != 0 {
                errs.push(format!(
                    "phantom extent {d} is not divisible by the network downsampling {down}"
                ));
            }
        }
    }
    errs
}

pub fn run(args: Args) -> Result<()> {
    if let Some(resume_dir) = &args.resume {
        if args.common.config.is_some() || args.loss.is_some() || args.common.seed.is_some() {
            bail!(
                "a resumed run reuses the settings recorded in its checkpoint; \
                 only --iterations (to extend), --data, and --out may be given"
            );
        }
        return run_resumed(args.common, args.data, args.iterations, resume_dir.clone());
    }

    let mut cfg: TrainCmdConfig = load_config(args.common.config.as_deref())?;
    if let Some(loss) = &args.loss {
        cfg.train.metric = loss
            .parse::<MetricKind>()
            .map_err(|e| anyhow::anyhow!("{e}; allowed: dv, mi, lncc, ssd"))?;
    }
    if let Some(iters) = args.iterations {
        cfg.train.iterations = iters;
    }
    if let Some(seed) = args.common.seed {
        cfg.train.seed = seed;
    }
    let errs = validation_errors(&cfg, args.data.is_none());
    if !errs.is_empty() {
        bail!("invalid training config:\n  {}", errs.join("\n  "));
    }

    let precision = args.common.precision();
    match precision {
        Precision::F32 => run_fresh::<f32>(&args.common, args.data.as_deref(), cfg, precision),
        Precision::F64 => run_fresh::<f64>(&args.common, args.data.as_deref(), cfg, precision),
    }
}

fn make_source(
    data: Option<&Path>,
    cfg: &TrainCmdConfig,
) -> Result<Box<dyn PairSource>> {
    Ok(match data {
        Some(dir) => Box::new(DirectorySource::open(dir, "train", cfg.train.seed)?),
        None => Box::new(PhantomSource::new(cfg.phantom.clone(), cfg.train.seed)),
    })
}

fn run_fresh<T: Scalar>(
    common: &Common,
    data: Option<&Path>,
    cfg: TrainCmdConfig,
    precision: Precision,
) -> Result<()> {
    let manifest = RunManifest::start(
        "train",
        cfg.train.seed,
        precision.name(),
        serde_json::to_value(&cfg)?,
    );
    let mut source = make_source(data, &cfg)?;
    let outcome = resume_training::<T>(source.as_mut(), &cfg.train, None)?;
    let outputs = persist(&common.out, &cfg, &outcome, false)?;
    manifest.finish(&common.out, outputs, summarize(&outcome))?;
    Ok(())
}

fn run_resumed(
    common: Common,
    data: Option<std::path::PathBuf>,
    iterations: Option<usize>,
    resume_dir: std::path::PathBuf,
) -> Result<()> {
    let live_path = resume_dir.join(LIVE_CKPT);
    let (dtype, meta) = peek_checkpoint(&live_path)
        .with_context(|| format!("reading checkpoint {}", live_path.display()))?;
    if let Some(flag) = common.precision {
        if flag.name() != dtype {
            bail!(
                "checkpoint was trained in {dtype}; --precision {} conflicts",
                flag.name()
            );
        }
    }
    let mut cfg: TrainCmdConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| anyhow::anyhow!("checkpoint lacks its config echo"))?,
    )
    .context("decoding config from checkpoint")?;
    if let Some(total) = iterations {
        cfg.train.iterations = total;
    }
    match dtype.as_str() {
        "f32" => resume_typed::<f32>(&common, data.as_deref(), cfg, &resume_dir, Precision::F32),
        "f64" => resume_typed::<f64>(&common, data.as_deref(), cfg, &resume_dir, Precision::F64),
        other => bail!("unsupported checkpoint dtype {other}"),
    }
}

fn resume_typed<T: Scalar>(
    common: &Common,
    data: Option<&Path>,
    cfg: TrainCmdConfig,
    resume_dir: &Path,
    precision: Precision,
) -> Result<()> {
    let manifest = RunManifest::start(
        "train",
        cfg.train.seed,
        precision.name(),
        serde_json::to_value(&cfg)?,
    );

    let mut live = RegNetParams::<T>::init(&cfg.train.regnet, cfg.train.seed)?;
    let mut adam = AdamState::new(&live, cfg.train.lr);
    let meta = load_params(&resume_dir.join(LIVE_CKPT), &mut live, Some(&mut adam))?;
    let start_iteration = meta
        .get("iteration")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| anyhow::anyhow!("checkpoint lacks its iteration counter"))? as usize;

    let mut avg = live.clone();
    load_params(&resume_dir.join(EMA_CKPT), &mut avg, None)?;

    let (estimator, est_adam) = if cfg.train.metric == MetricKind::Dv {
        let mut est = KldivNetParams::<T>::init(&cfg.train.estimator, cfg.train.seed);
        let mut opt = AdamState::new(&est, cfg.train.estimator_lr);
        load_params(
            &resume_dir.join(ESTIMATOR_CKPT),
            &mut est,
            Some(&mut opt),
        )?;
        (Some(est), Some(opt))
    } else {
        (None, None)
    };

    let state = TrainState {
        live,
        avg,
        estimator,
        adam,
        est_adam,
        start_iteration,
    };
    let mut source = make_source(data, &cfg)?;
    let outcome = resume_training::<T>(source.as_mut(), &cfg.train, Some(state))?;
    // Appending to an existing history keeps one continuous record when
    // resuming in place; a fresh output directory starts a new file.
    let append = common.out.join(HISTORY_CSV).exists();
    let outputs = persist(&common.out, &cfg, &outcome, append)?;
    manifest.finish(&common.out, outputs, summarize(&outcome))?;
    Ok(())
}

fn summarize<T: Scalar>(outcome: &TrainedRegistration<T>) -> serde_json::Value {
    json!({
        "iterations_run": outcome.history.len(),
        "next_iteration": outcome.next_iteration,
        "aborted_at": outcome.aborted_at,
        "final_loss": outcome.history.last().map(|r| r.loss),
    })
}

fn persist<T: Scalar>(
    out: &Path,
    cfg: &TrainCmdConfig,
    outcome: &TrainedRegistration<T>,
    append_history: bool,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let meta = json!({
        "config": cfg,
        "iteration": outcome.next_iteration,
    });

    let mut outputs = vec![LIVE_CKPT.to_string(), EMA_CKPT.to_string()];
    save_params(
        &out.join(LIVE_CKPT),
        &outcome.live_params,
        Some(&outcome.adam),
        meta.clone(),
    )?;
    save_params(&out.join(EMA_CKPT), &outcome.params, None, meta.clone())?;
    if let (Some(est), Some(opt)) = (&outcome.estimator, &outcome.est_adam) {
        save_params(&out.join(ESTIMATOR_CKPT), est, Some(opt), meta)?;
        outputs.push(ESTIMATOR_CKPT.to_string());
    }

    let mut csv = String::new();
    if !append_history {
        csv.push_str("iteration,loss,joint_term,marginal_term,mean_abs_displacement\n");
    }
    for r in &outcome.history {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.iteration, r.loss, r.joint_term, r.marginal_term, r.mean_abs_displacement
        )?;
    }
    let path = out.join(HISTORY_CSV);
    if append_history {
        use std::io::Write as _;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .with_context(|| format!("appending {}", path.display()))?;
        f.write_all(csv.as_bytes())?;
    } else {
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    outputs.push(HISTORY_CSV.to_string());
    Ok(outputs)
}
