//! Optimization machinery shared by every trainable component: a named
//! parameter-set abstraction, Adam, and exponential moving averages.
//!
//! Parameter order is part of each set's contract. `named_tensors` must
//! return the same names in the same order every call; optimizer moments,
//! averaged copies, gradients, and checkpoints all rely on it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{load_tensors, save_tensors, Scalar, Tape, Tensor, Value};
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::kldivnet::{shuffle_voxels, KldivNetConfig, KldivNetParams};
use crate::phantom::{generate_pair, PhantomConfig, PhantomPair};
use crate::regnet::{RegNetConfig, RegNetParams};
use crate::similarity::{lncc, mi_pwde, ssd, MetricKind, MiOptions};
use crate::transform::{smoothness_value, warp_image, DisplacementField};

/// Settings of the closed-form similarity measures.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MetricParams {
    pub lncc_window: usize,
    pub mi: MiOptions,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            lncc_window: crate::similarity::DEFAULT_LNCC_WINDOW,
            mi: MiOptions::default(),
        }
    }
}

/// Similarity score of a closed-form metric, oriented so higher is better.
/// The trained metric needs its own scorer state and is dispatched by the
/// caller instead.
pub fn classic_score<'t, T: Scalar>(
    metric: MetricKind,
    moved: Value<'t, T>,
    fixed: Value<'t, T>,
    mp: &MetricParams,
) -> Result<Value<'t, T>> {
    match metric {
        MetricKind::Ssd => Ok(ssd(moved, fixed).neg()),
        MetricKind::Lncc => lncc(moved, fixed, mp.lncc_window),
        MetricKind::Mi => mi_pwde(moved, fixed, &mp.mi),
        MetricKind::Dv => Err(CoreError::InvalidArgument(
            "the trained metric carries scorer state; score it directly".into(),
        )),
    }
}

/// A collection of trainable tensors with stable names and ordering.
pub trait ParamSet<T: Scalar> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    /// Total number of scalar parameters.
    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Adam optimizer state over one parameter set.
///
/// Defaults follow common practice: step size 1e-3, decay rates 0.9 and
/// 0.999, denominator guard 1e-8, with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &impl ParamSet<T>, lr: f64) -> Self {
        let shapes: Vec<Vec<usize>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` must match the set's tensor order.
    pub fn step(&mut self, params: &mut impl ParamSet<T>, grads: &[Tensor<T>]) {
        let mut tensors = params.named_tensors_mut();
        assert_eq!(tensors.len(), grads.len(), "gradient list order mismatch");
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let c1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (i, (_, p)) in tensors.iter_mut().enumerate() {
            assert_eq!(p.shape(), grads[i].shape(), "gradient shape mismatch");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Tensors to persist alongside the parameters when checkpointing.
    fn moment_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, t) in self.m.iter().enumerate() {
            out.push((format!("adam.m.{i}"), t));
        }
        for (i, t) in self.v.iter().enumerate() {
            out.push((format!("adam.v.{i}"), t));
        }
        out
    }
}

/// Blend an averaged copy toward the live parameters:
/// `avg = decay * avg + (1 - decay) * live`, tensor by tensor.
pub fn ema_update<T: Scalar, P: ParamSet<T>>(avg: &mut P, live: &P, decay: f64) {
    let d = T::from_f64(decay);
    let one = T::one();
    let live_tensors = live.named_tensors();
    let mut avg_tensors = avg.named_tensors_mut();
    assert_eq!(live_tensors.len(), avg_tensors.len());
    for ((an, a), (ln, l)) in avg_tensors.iter_mut().zip(&live_tensors) {
        assert_eq!(an, ln, "parameter sets disagree on tensor order");
        for (av, lv) in a.data_mut().iter_mut().zip(l.data()) {
            *av = d * *av + (one - d) * *lv;
        }
    }
}

/// Write a parameter set (with optional optimizer moments) to one file.
pub fn save_params<T: Scalar, P: ParamSet<T>>(
    path: &std::path::Path,
    params: &P,
    adam: Option<&AdamState<T>>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut named: Vec<(String, &Tensor<T>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("param.{n}"), t))
        .collect();
    let mut meta = meta;
    if let Some(state) = adam {
        named.extend(state.moment_tensors());
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert("adam_step".into(), serde_json::json!(state.step_count()));
            map.insert("adam_lr".into(), serde_json::json!(state.lr));
        }
    }
    save_tensors(path, &meta, &named)
}

/// Restore a parameter set (and optimizer moments, when present) written by
/// [`save_params`]. Returns the checkpoint metadata.
pub fn load_params<T: Scalar, P: ParamSet<T>>(
    path: &std::path::Path,
    params: &mut P,
    adam: Option<&mut AdamState<T>>,
) -> Result<serde_json::Value> {
    let ckpt = load_tensors::<T>(path)?;
    for (name, tensor) in params.named_tensors_mut() {
        ckpt.restore(&format!("param.{name}"), tensor)?;
    }
    if let Some(state) = adam {
        for (i, t) in state.m.iter_mut().enumerate() {
            ckpt.restore(&format!("adam.m.{i}"), t)?;
        }
        for (i, t) in state.v.iter_mut().enumerate() {
            ckpt.restore(&format!("adam.v.{i}"), t)?;
        }
        state.step = ckpt
            .meta
            .get("adam_step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CoreError::Checkpoint("missing adam_step in metadata".into()))?;
    }
    Ok(ckpt.meta)
}

/// A stream of (moving, fixed) image pairs on a common grid.
pub trait PairSource {
    fn dims(&self) -> &[usize];
    fn spacing(&self) -> &[f64];
    /// Produce the next training pair. Successive calls may repeat pairs
    /// (a finite dataset) or synthesize fresh ones.
    fn next_pair(&mut self) -> Result<(Image, Image)>;

    /// Advance past `n` draws without using them, so a resumed run sees
    /// the same stream it would have seen uninterrupted. Sources that can
    /// jump should override this.
    fn skip(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.next_pair()?;
        }
        Ok(())
    }
}

/// Endless source of synthetic pairs; draw `k` yields the pair generated
/// from seed `base_seed + k`, so a source is reproducible and disjoint
/// index ranges give disjoint data.
pub struct PhantomSource {
    pub cfg: PhantomConfig,
    base_seed: u64,
    drawn: u64,
}

impl PhantomSource {
    pub fn new(cfg: PhantomConfig, base_seed: u64) -> Self {
        Self {
            cfg,
            base_seed,
            drawn: 0,
        }
    }

    /// The full labeled pair at a fixed index, independent of draw state.
    pub fn pair_at(&self, index: u64) -> Result<PhantomPair> {
        generate_pair(&self.cfg, self.base_seed.wrapping_add(index))
    }
}

impl PairSource for PhantomSource {
    fn dims(&self) -> &[usize] {
        &self.cfg.dims
    }

    fn spacing(&self) -> &[f64] {
        &self.cfg.spacing
    }

    fn next_pair(&mut self) -> Result<(Image, Image)> {
        let pair = self.pair_at(self.drawn)?;
        self.drawn += 1;
        Ok((pair.moving, pair.fixed))
    }

    fn skip(&mut self, n: u64) -> Result<()> {
        self.drawn += n;
        Ok(())
    }
}

/// Stack same-shape single-channel images into one `[n, 1, spatial...]`
/// tensor.
pub fn stack_images<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| CoreError::InvalidArgument("empty image batch".into()))?;
    let mut shape = vec![images.len(), 1];
    shape.extend_from_slice(&first.dims);
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.dims != first.dims {
            return Err(CoreError::ShapeMismatch(format!(
                "batch mixes grids {:?} and {:?}",
                first.dims, img.dims
            )));
        }
        data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::new(shape, data))
}

/// Apply a small random rigid jitter (rotation up to `max_rot_deg` about
/// the grid center, shift up to `max_shift_frac` of each extent) to a
/// two-dimensional image. Used as training augmentation.
pub fn augment_image(
    img: &Image,
    max_shift_frac: f64,
    max_rot_deg: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    if img.dims.len() != 2 {
        return Err(CoreError::Dimension(
            "rigid jitter is implemented for two-dimensional images".into(),
        ));
    }
    let (rows, cols) = (img.dims[0], img.dims[1]);
    let theta = rng.random_range(-1.0..1.0) * max_rot_deg.to_radians();
    let sr = rng.random_range(-1.0..1.0) * max_shift_frac * rows as f64;
    let sc = rng.random_range(-1.0..1.0) * max_shift_frac * cols as f64;
    let (cr, cc) = ((rows - 1) as f64 / 2.0, (cols - 1) as f64 / 2.0);
    let (sin, cos) = theta.sin_cos();

    let vox = rows * cols;
    let mut vectors = vec![0f32; 2 * vox];
    for r in 0..rows {
        for c in 0..cols {
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            let src_r = cr + cos * dr - sin * dc + sr;
            let src_c = cc + sin * dr + cos * dc + sc;
            let p = r * cols + c;
            vectors[p] = (src_r - r as f64) as f32;
            vectors[vox + p] = (src_c - c as f64) as f32;
        }
    }
    let field = DisplacementField::new(img.dims.clone(), img.spacing.clone(), vectors)?;
    warp_image(img, &field)
}

/// Settings for training the registration network.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub metric: MetricKind,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate of the similarity scorer (trained metric only).
    pub estimator_lr: f64,
    /// Decay of the averaged network weights used for inference.
    pub ema_decay: f64,
    pub smooth_weight: f64,
    pub metric_params: MetricParams,
    pub regnet: RegNetConfig,
    pub estimator: KldivNetConfig,
    /// Random rigid jitter of the moving image before each step.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Dv,
            iterations: 2000,
            batch: 4,
            lr: 1e-3,
            estimator_lr: 1e-3,
            ema_decay: 0.999,
            smooth_weight: 0.0,
            metric_params: MetricParams::default(),
            regnet: RegNetConfig::default(),
            estimator: KldivNetConfig::default(),
            augment: false,
            seed: 0,
        }
    }
}

/// One training step's bookkeeping.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    /// The minimized objective (negative similarity plus smoothness).
    pub loss: f64,
    /// Mean score of true pairs (trained metric) or the similarity itself.
    pub joint_term: f64,
    /// Log-mean-exp score against shuffled partners; zero for closed-form
    /// metrics.
    pub marginal_term: f64,
    /// Mean absolute predicted displacement, voxels.
    pub mean_abs_displacement: f64,
}

/// Everything produced by [`train_divregnet`].
pub struct TrainedRegistration<T: Scalar> {
    /// Averaged weights; use these for inference.
    pub params: RegNetParams<T>,
    /// Weights as of the last step, for resuming.
    pub live_params: RegNetParams<T>,
    /// The jointly trained scorer, when the metric was the trained one.
    pub estimator: Option<KldivNetParams<T>>,
    /// Optimizer states, for resuming.
    pub adam: AdamState<T>,
    pub est_adam: Option<AdamState<T>>,
    /// Records of the iterations run by THIS call (a resumed run's history
    /// starts where the checkpoint left off).
    pub history: Vec<TrainRecord>,
    /// Set when a non-finite loss stopped training early; parameters are
    /// from the last finite step.
    pub aborted_at: Option<usize>,
    /// One past the last iteration run; equals the configured total when
    /// training finished.
    pub next_iteration: usize,
}

/// A snapshot a training run can continue from.
pub struct TrainState<T: Scalar> {
    pub live: RegNetParams<T>,
    pub avg: RegNetParams<T>,
    pub estimator: Option<KldivNetParams<T>>,
    pub adam: AdamState<T>,
    pub est_adam: Option<AdamState<T>>,
    /// First iteration the continued run will execute.
    pub start_iteration: usize,
}

/// Train the registration network on pairs from `source`.
///
/// Every step draws a fresh batch, predicts displacement fields, warps the
/// moving images, scores them against the fixed images, and takes one
/// gradient step. With the trained metric the scorer ascends the same
/// objective in the same backward pass (its gain is the network's gain),
/// using a freshly shuffled partner every step. A slow average of the
/// network weights is maintained for inference.
pub fn train_divregnet<T: Scalar>(
    source: &mut dyn PairSource,
    cfg: &TrainConfig,
) -> Result<TrainedRegistration<T>> {
    resume_training(source, cfg, None)
}

/// [`train_divregnet`], optionally continuing from a snapshot. Pass a
/// freshly constructed source; the function fast-forwards it to where the
/// snapshot left off, so an interrupted-and-resumed run reproduces an
/// uninterrupted one bit for bit.
pub fn resume_training<T: Scalar>(
    source: &mut dyn PairSource,
    cfg: &TrainConfig,
    state: Option<TrainState<T>>,
) -> Result<TrainedRegistration<T>> {
    if cfg.batch == 0 || cfg.iterations == 0 {
        return Err(CoreError::InvalidArgument(
            "batch and iteration counts must be positive".into(),
        ));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0)
        || (cfg.metric == MetricKind::Dv && !(cfg.estimator_lr.is_finite() && cfg.estimator_lr > 0.0))
    {
        return Err(CoreError::InvalidArgument(
            "learning rates must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(CoreError::InvalidArgument(
            "averaging decay must lie in [0, 1)".into(),
        ));
    }

    let (mut live, mut avg, mut estimator, mut adam, mut est_adam, start) = match state {
        Some(s) => {
            if s.start_iteration >= cfg.iterations {
                return Err(CoreError::InvalidArgument(format!(
                    "checkpoint is already at iteration {} of {}",
                    s.start_iteration, cfg.iterations
                )));
            }
            (
                s.live,
                s.avg,
                s.estimator,
                s.adam,
                s.est_adam,
                s.start_iteration,
            )
        }
        None => {
            let live = RegNetParams::<T>::init(&cfg.regnet, cfg.seed)?;
            let avg = live.clone();
            let adam = AdamState::new(&live, cfg.lr);
            let estimator = if cfg.metric == MetricKind::Dv {
                Some(KldivNetParams::<T>::init(
                    &cfg.estimator,
                    cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
                ))
            } else {
                None
            };
            let est_adam = estimator
                .as_ref()
                .map(|e| AdamState::new(e, cfg.estimator_lr));
            (live, avg, estimator, adam, est_adam, 0)
        }
    };
    if estimator.is_some() != (cfg.metric == MetricKind::Dv) {
        return Err(CoreError::InvalidArgument(
            "snapshot and config disagree on whether a scorer is trained".into(),
        ));
    }
    source.skip(start as u64 * cfg.batch as u64)?;

    let mut history = Vec::with_capacity(cfg.iterations - start);
    let mut aborted_at = None;
    let mut next_iteration = cfg.iterations;

    for iteration in start..cfg.iterations {
        // One stream per iteration, so the position never depends on how
        // the run was partitioned into resumes.
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_add(1)
                .wrapping_add((iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        );
        let mut movs = Vec::with_capacity(cfg.batch);
        let mut fixs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (mut m, f) = source.next_pair()?;
            if cfg.augment {
                m = augment_image(&m, 0.05, 10.0, &mut rng)?;
            }
            movs.push(m);
            fixs.push(f);
        }
        let moving_t = stack_images::<T>(&movs)?;
        let fixed_t = stack_images::<T>(&fixs)?;
        // Bad data gets the same graceful stop as a diverged loss; the
        // parameters still hold the last finite step.
        if !moving_t.all_finite() || !fixed_t.all_finite() {
            aborted_at = Some(iteration);
            next_iteration = iteration;
            break;
        }

        let tape = Tape::new();
        let vars = live.bind(&tape);
        let m = tape.input(moving_t);
        let f = tape.input(fixed_t.clone());
        let flow = vars.flow(m, f)?;
        let moved = m.warp(flow);

        let est_vars = estimator.as_ref().map(|e| e.bind(&tape));
        let (score, joint_term, marginal_term) = match &est_vars {
            Some(ev) => {
                let shuffled = tape.input(shuffle_voxels(&fixed_t, &mut rng));
                let joint = ev.score_map(moved, f).reduce_mean();
                let marginal = ev.score_map(moved, shuffled).log_mean_exp();
                (
                    joint.sub(marginal),
                    joint.item().as_f64(),
                    marginal.item().as_f64(),
                )
            }
            None => {
                let s = classic_score(cfg.metric, moved, f, &cfg.metric_params)?;
                (s, s.item().as_f64(), 0.0)
            }
        };
        let loss = if cfg.smooth_weight != 0.0 {
            score
                .neg()
                .add(smoothness_value(flow).scale(T::from_f64(cfg.smooth_weight)))
        } else {
            score.neg()
        };

        let loss_val = loss.item().as_f64();
        if !loss_val.is_finite() {
            aborted_at = Some(iteration);
            next_iteration = iteration;
            break;
        }
        let flow_t = flow.value();
        let mean_abs = flow_t.data().iter().map(|v| v.as_f64().abs()).sum::<f64>()
            / flow_t.data().len() as f64;
        history.push(TrainRecord {
            iteration,
            loss: loss_val,
            joint_term,
            marginal_term,
            mean_abs_displacement: mean_abs,
        });

        let grads = tape.backward(loss);
        let net_grads: Vec<Tensor<T>> = vars
            .ordered()
            .iter()
            .map(|v| grads.get_or_zeros(*v))
            .collect();
        adam.step(&mut live, &net_grads);
        if let (Some(ev), Some(e), Some(opt)) =
            (&est_vars, estimator.as_mut(), est_adam.as_mut())
        {
            let est_grads: Vec<Tensor<T>> = ev
                .ordered()
                .iter()
                .map(|v| grads.get_or_zeros(*v))
                .collect();
            opt.step(e, &est_grads);
        }
        ema_update(&mut avg, &live, cfg.ema_decay);
    }

    Ok(TrainedRegistration {
        params: avg,
        live_params: live,
        estimator,
        adam,
        est_adam,
        history,
        aborted_at,
        next_iteration,
    })
}
