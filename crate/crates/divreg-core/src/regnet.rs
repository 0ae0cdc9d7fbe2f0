//! Deformable registration engines.
//!
//! [`RegNetParams`] is an encoder-decoder network that maps a concatenated
//! (moving, fixed) pair to a dense displacement field in one pass. Its
//! last layer starts at zero, so an untrained network is exactly the
//! identity transform; training only ever has to explain the residual.
//! [`iterative_register`] is the classic alternative: gradient ascent on a
//! similarity directly over the transform parameters of one pair.
//!
//! Normalization inside the network is switchable: each layer learns a
//! softmax blend over instance, layer, and batch statistics instead of
//! committing to one. Decoder features pass through a channel gate that
//! rescales each channel from its global average (squeeze and excitation).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Scalar, Tape, Tensor, Value};
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::kldivnet::{dv_similarity, shuffle_voxels, KldivNetConfig, KldivNetParams};
use crate::similarity::MetricKind;
use crate::train::{classic_score, AdamState, MetricParams, ParamSet};
use crate::transform::{smoothness_value, DisplacementField};

/// Weights of one densely connected layer.
#[derive(Debug, Clone)]
pub struct LinearParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Tensor::new(
                vec![fan_out, fan_in],
                (0..fan_out * fan_in)
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect(),
            ),
            b: Tensor::new(
                vec![fan_out],
                (0..fan_out)
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect(),
            ),
        }
    }
}

/// Weights of one spatial convolution (kernel width 3 here).
#[derive(Debug, Clone)]
pub struct ConvParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    fn init(
        ci: usize,
        co: usize,
        k: usize,
        spatial_rank: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = ci * k.pow(spatial_rank as u32);
        let gain2 = 2.0 / (1.0 + slope * slope);
        let wb = (3.0 * gain2 / fan_in as f64).sqrt();
        let mut w_shape = vec![co, ci];
        w_shape.extend(std::iter::repeat_n(k, spatial_rank));
        let n: usize = w_shape.iter().product();
        let bb = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Tensor::new(
                w_shape,
                (0..n)
                    .map(|_| T::from_f64(rng.random_range(-wb..wb)))
                    .collect(),
            ),
            b: Tensor::new(
                vec![co],
                (0..co)
                    .map(|_| T::from_f64(rng.random_range(-bb..bb)))
                    .collect(),
            ),
        }
    }

    fn zeros(ci: usize, co: usize, k: usize, spatial_rank: usize) -> Self {
        let mut w_shape = vec![co, ci];
        w_shape.extend(std::iter::repeat_n(k, spatial_rank));
        Self {
            w: Tensor::zeros(&w_shape),
            b: Tensor::zeros(&[co]),
        }
    }
}

/// Learned statistics blend: an affine transform after normalizing with
/// softmax-weighted mixtures of instance, layer, and batch moments.
#[derive(Debug, Clone)]
pub struct SwitchNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean_logits: Tensor<T>,
    pub var_logits: Tensor<T>,
}

impl<T: Scalar> SwitchNormParams<T> {
    fn init(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            mean_logits: Tensor::zeros(&[3]),
            var_logits: Tensor::zeros(&[3]),
        }
    }
}

/// Channel-gate weights (squeeze and excitation).
#[derive(Debug, Clone)]
pub struct SeParams<T: Scalar> {
    pub reduce: LinearParams<T>,
    pub expand: LinearParams<T>,
}

impl<T: Scalar> SeParams<T> {
    fn init(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = channels / reduction;
        Self {
            reduce: LinearParams::init(channels, mid, rng),
            expand: LinearParams::init(mid, channels, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncBlockParams<T: Scalar> {
    pub conv: ConvParams<T>,
    pub norm: SwitchNormParams<T>,
}

#[derive(Debug, Clone)]
pub struct DecBlockParams<T: Scalar> {
    pub conv: ConvParams<T>,
    pub norm: SwitchNormParams<T>,
    pub se: SeParams<T>,
}

/// Shape of the registration network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegNetConfig {
    pub spatial_rank: usize,
    /// Encoder widths; each block halves every spatial extent.
    pub enc_channels: Vec<usize>,
    /// Decoder widths; each block doubles every spatial extent back.
    pub dec_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub se_reduction: usize,
    pub norm_eps: f64,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self {
            spatial_rank: 2,
            enc_channels: vec![16, 32, 32, 32],
            dec_channels: vec![32, 32, 32, 16],
            leaky_slope: 0.2,
            se_reduction: 8,
            norm_eps: 1e-5,
        }
    }
}

impl RegNetConfig {
    /// Channels entering each decoder conv: upsampled previous output
    /// concatenated with the matching encoder feature (or the raw input
    /// pair at the last block).
    fn dec_inputs(&self) -> Vec<usize> {
        let e = &self.enc_channels;
        let d = &self.dec_channels;
        let mut ins = Vec::with_capacity(d.len());
        let mut prev = *e.last().unwrap();
        for i in 0..d.len() {
            let skip = if i + 2 <= e.len() {
                e[e.len() - 2 - i]
            } else {
                2 // the concatenated image pair
            };
            ins.push(prev + skip);
            prev = d[i];
        }
        ins
    }

    fn validate(&self) -> Result<()> {
        if self.spatial_rank < 1 || self.spatial_rank > 3 {
            return Err(CoreError::Dimension(format!(
                "spatial rank {} unsupported",
                self.spatial_rank
            )));
        }
        if self.enc_channels.len() != self.dec_channels.len() || self.enc_channels.is_empty() {
            return Err(CoreError::InvalidArgument(
                "encoder and decoder must have the same nonzero depth".into(),
            ));
        }
        for (i, &c) in self.dec_channels.iter().enumerate() {
            if c % self.se_reduction != 0 {
                return Err(CoreError::InvalidArgument(format!(
                    "decoder width {c} (block {i}) not divisible by gate reduction {}",
                    self.se_reduction
                )));
            }
        }
        Ok(())
    }

    /// Check an input image shape `[n, 1, spatial...]` against the network.
    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 + self.spatial_rank || shape[1] != 1 {
            return Err(CoreError::Dimension(format!(
                "expected [n, 1, {} spatial dims], got {shape:?}",
                self.spatial_rank
            )));
        }
        let down = 1usize << self.enc_channels.len();
        for &d in &shape[2..] {
            if d == 0 || d % down != 0 {
                return Err(CoreError::Dimension(format!(
                    "spatial extent {d} not divisible by the total downsampling {down}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the registration network.
#[derive(Debug, Clone)]
pub struct RegNetParams<T: Scalar> {
    pub cfg: RegNetConfig,
    pub enc: Vec<EncBlockParams<T>>,
    pub dec: Vec<DecBlockParams<T>>,
    pub flow: ConvParams<T>,
}

impl<T: Scalar> RegNetParams<T> {
    pub fn init(cfg: &RegNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.spatial_rank;
        let s = cfg.leaky_slope;
        let mut enc = Vec::with_capacity(cfg.enc_channels.len());
        let mut ci = 2;
        for &co in &cfg.enc_channels {
            enc.push(EncBlockParams {
                conv: ConvParams::init(ci, co, 3, r, s, &mut rng),
                norm: SwitchNormParams::init(co),
            });
            ci = co;
        }
        let mut dec = Vec::with_capacity(cfg.dec_channels.len());
        for (&co, &cin) in cfg.dec_channels.iter().zip(cfg.dec_inputs().iter()) {
            dec.push(DecBlockParams {
                conv: ConvParams::init(cin, co, 3, r, s, &mut rng),
                norm: SwitchNormParams::init(co),
                se: SeParams::init(co, cfg.se_reduction, &mut rng),
            });
        }
        // Zero flow weights: the network is the identity transform until
        // training says otherwise.
        let flow = ConvParams::zeros(*cfg.dec_channels.last().unwrap(), r, 3, r);
        Ok(Self {
            cfg: cfg.clone(),
            enc,
            dec,
            flow,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> RegNetVars<'t, T> {
        let conv = |c: &ConvParams<T>| (tape.input(c.w.clone()), tape.input(c.b.clone()));
        let norm = |n: &SwitchNormParams<T>| SnVars {
            gamma: tape.input(n.gamma.clone()),
            beta: tape.input(n.beta.clone()),
            mean_logits: tape.input(n.mean_logits.clone()),
            var_logits: tape.input(n.var_logits.clone()),
        };
        let lin = |l: &LinearParams<T>| (tape.input(l.w.clone()), tape.input(l.b.clone()));
        RegNetVars {
            cfg: self.cfg.clone(),
            enc: self
                .enc
                .iter()
                .map(|b| EncVars {
                    conv: conv(&b.conv),
                    norm: norm(&b.norm),
                })
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|b| DecVars {
                    conv: conv(&b.conv),
                    norm: norm(&b.norm),
                    se: SeVars {
                        reduce: lin(&b.se.reduce),
                        expand: lin(&b.se.expand),
                    },
                })
                .collect(),
            flow: conv(&self.flow),
        }
    }
}

impl<T: Scalar> ParamSet<T> for RegNetParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            out.push((format!("enc.{i}.conv.w"), &b.conv.w));
            out.push((format!("enc.{i}.conv.b"), &b.conv.b));
            out.push((format!("enc.{i}.norm.gamma"), &b.norm.gamma));
            out.push((format!("enc.{i}.norm.beta"), &b.norm.beta));
            out.push((format!("enc.{i}.norm.mean_logits"), &b.norm.mean_logits));
            out.push((format!("enc.{i}.norm.var_logits"), &b.norm.var_logits));
        }
        for (i, b) in self.dec.iter().enumerate() {
            out.push((format!("dec.{i}.conv.w"), &b.conv.w));
            out.push((format!("dec.{i}.conv.b"), &b.conv.b));
            out.push((format!("dec.{i}.norm.gamma"), &b.norm.gamma));
            out.push((format!("dec.{i}.norm.beta"), &b.norm.beta));
            out.push((format!("dec.{i}.norm.mean_logits"), &b.norm.mean_logits));
            out.push((format!("dec.{i}.norm.var_logits"), &b.norm.var_logits));
            out.push((format!("dec.{i}.se.reduce.w"), &b.se.reduce.w));
            out.push((format!("dec.{i}.se.reduce.b"), &b.se.reduce.b));
            out.push((format!("dec.{i}.se.expand.w"), &b.se.expand.w));
            out.push((format!("dec.{i}.se.expand.b"), &b.se.expand.b));
        }
        out.push(("flow.w".into(), &self.flow.w));
        out.push(("flow.b".into(), &self.flow.b));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc.{i}.conv.w"), &mut b.conv.w));
            out.push((format!("enc.{i}.conv.b"), &mut b.conv.b));
            out.push((format!("enc.{i}.norm.gamma"), &mut b.norm.gamma));
            out.push((format!("enc.{i}.norm.beta"), &mut b.norm.beta));
            out.push((format!("enc.{i}.norm.mean_logits"), &mut b.norm.mean_logits));
            out.push((format!("enc.{i}.norm.var_logits"), &mut b.norm.var_logits));
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec.{i}.conv.w"), &mut b.conv.w));
            out.push((format!("dec.{i}.conv.b"), &mut b.conv.b));
            out.push((format!("dec.{i}.norm.gamma"), &mut b.norm.gamma));
            out.push((format!("dec.{i}.norm.beta"), &mut b.norm.beta));
            out.push((format!("dec.{i}.norm.mean_logits"), &mut b.norm.mean_logits));
            out.push((format!("dec.{i}.norm.var_logits"), &mut b.norm.var_logits));
            out.push((format!("dec.{i}.se.reduce.w"), &mut b.se.reduce.w));
            out.push((format!("dec.{i}.se.reduce.b"), &mut b.se.reduce.b));
            out.push((format!("dec.{i}.se.expand.w"), &mut b.se.expand.w));
            out.push((format!("dec.{i}.se.expand.b"), &mut b.se.expand.b));
        }
        out.push(("flow.w".into(), &mut self.flow.w));
        out.push(("flow.b".into(), &mut self.flow.b));
        out
    }
}

struct SnVars<'t, T: Scalar> {
    gamma: Value<'t, T>,
    beta: Value<'t, T>,
    mean_logits: Value<'t, T>,
    var_logits: Value<'t, T>,
}

struct SeVars<'t, T: Scalar> {
    reduce: (Value<'t, T>, Value<'t, T>),
    expand: (Value<'t, T>, Value<'t, T>),
}

struct EncVars<'t, T: Scalar> {
    conv: (Value<'t, T>, Value<'t, T>),
    norm: SnVars<'t, T>,
}

struct DecVars<'t, T: Scalar> {
    conv: (Value<'t, T>, Value<'t, T>),
    norm: SnVars<'t, T>,
    se: SeVars<'t, T>,
}

/// Tape-bound copy of [`RegNetParams`].
pub struct RegNetVars<'t, T: Scalar> {
    pub cfg: RegNetConfig,
    enc: Vec<EncVars<'t, T>>,
    dec: Vec<DecVars<'t, T>>,
    flow: (Value<'t, T>, Value<'t, T>),
}

/// Normalize with the learned blend of instance, layer, and batch moments,
/// then apply the affine transform. With one item per batch, batch moments
/// coincide with instance moments and the blend degenerates gracefully.
fn switch_norm<'t, T: Scalar>(x: Value<'t, T>, sn: &SnVars<'t, T>, eps: f64) -> Value<'t, T> {
    let shape = x.shape();
    let rank = shape.len();
    let spatial: Vec<usize> = (2..rank).collect();
    let layer: Vec<usize> = (1..rank).collect();
    let mut batch = vec![0usize];
    batch.extend(&spatial);

    let x2 = x.mul(x);
    let stats = |axes: &[usize]| {
        let mu = x.mean_axes(axes);
        let var = x2.mean_axes(axes).sub(mu.mul(mu));
        (mu, var)
    };
    let (mu_i, var_i) = stats(&spatial);
    let (mu_l, var_l) = stats(&layer);
    let (mu_b, var_b) = stats(&batch);

    let ones = vec![1usize; rank];
    let pick = |w: Value<'t, T>, k: usize| w.slice_axis(0, k, 1).reshape(&ones);
    let wm = sn.mean_logits.softmax(0);
    let wv = sn.var_logits.softmax(0);

    let mean = mu_i
        .mul(pick(wm, 0))
        .add(mu_l.mul(pick(wm, 1)))
        .add(mu_b.mul(pick(wm, 2)));
    let var = var_i
        .mul(pick(wv, 0))
        .add(var_l.mul(pick(wv, 1)))
        .add(var_b.mul(pick(wv, 2)));

    let norm = x.sub(mean).div(var.add_scalar(T::from_f64(eps)).sqrt());
    let mut cshape = vec![1, shape[1]];
    cshape.extend(std::iter::repeat_n(1, rank - 2));
    norm.mul(sn.gamma.reshape(&cshape))
        .add(sn.beta.reshape(&cshape))
}

/// Rescale each channel by a learned gate driven by its global average.
fn se_gate<'t, T: Scalar>(x: Value<'t, T>, se: &SeVars<'t, T>) -> Value<'t, T> {
    let shape = x.shape();
    let z = x.global_avg_pool();
    let h = z.linear(se.reduce.0, se.reduce.1).relu();
    let g = h.linear(se.expand.0, se.expand.1).sigmoid();
    let mut gshape = vec![shape[0], shape[1]];
    gshape.extend(std::iter::repeat_n(1, shape.len() - 2));
    x.mul(g.reshape(&gshape))
}

impl<'t, T: Scalar> RegNetVars<'t, T> {
    /// Tape values in [`ParamSet::named_tensors`] order.
    pub fn ordered(&self) -> Vec<Value<'t, T>> {
        let mut out = Vec::new();
        for b in &self.enc {
            out.extend([
                b.conv.0,
                b.conv.1,
                b.norm.gamma,
                b.norm.beta,
                b.norm.mean_logits,
                b.norm.var_logits,
            ]);
        }
        for b in &self.dec {
            out.extend([
                b.conv.0,
                b.conv.1,
                b.norm.gamma,
                b.norm.beta,
                b.norm.mean_logits,
                b.norm.var_logits,
                b.se.reduce.0,
                b.se.reduce.1,
                b.se.expand.0,
                b.se.expand.1,
            ]);
        }
        out.extend([self.flow.0, self.flow.1]);
        out
    }

    /// Predict the displacement field `[n, rank, spatial...]`, in voxels,
    /// for a batch of image pairs `[n, 1, spatial...]`.
    pub fn flow(&self, moving: Value<'t, T>, fixed: Value<'t, T>) -> Result<Value<'t, T>> {
        self.cfg.validate_input(&moving.shape())?;
        if moving.shape() != fixed.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "pair shapes {:?} vs {:?}",
                moving.shape(),
                fixed.shape()
            )));
        }
        let slope = T::from_f64(self.cfg.leaky_slope);
        let eps = self.cfg.norm_eps;
        let x = moving.concat_channels(fixed);

        let mut skips = vec![x];
        let mut h = x;
        for b in &self.enc {
            h = h.conv(b.conv.0, b.conv.1, 2);
            h = switch_norm(h, &b.norm, eps).leaky_relu(slope);
            skips.push(h);
        }
        // skips = [pair, e1, e2, ..., e_last]; decoding pairs e_last's
        // upsampling with e_{last-1}, then e_{last-2}, ..., then the pair.
        for (i, b) in self.dec.iter().enumerate() {
            let skip = skips[skips.len() - 2 - i];
            h = h.nearest_upsample(2).concat_channels(skip);
            h = h.conv(b.conv.0, b.conv.1, 1);
            h = switch_norm(h, &b.norm, eps).leaky_relu(slope);
            h = se_gate(h, &b.se);
        }
        Ok(h.conv(self.flow.0, self.flow.1, 1))
    }
}

/// Run the network on one image pair and return the predicted field.
pub fn predict_flow<T: Scalar>(
    params: &RegNetParams<T>,
    moving: &Image,
    fixed: &Image,
) -> Result<DisplacementField> {
    if moving.dims != fixed.dims || moving.spacing != fixed.spacing {
        return Err(CoreError::ShapeMismatch(
            "image pair disagrees on geometry".into(),
        ));
    }
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let m = tape.input(moving.to_tensor::<T>());
    let f = tape.input(fixed.to_tensor::<T>());
    let flow = vars.flow(m, f)?;
    DisplacementField::from_tensor(&flow.value(), moving.spacing.clone())
}

/// How [`iterative_register`] parametrizes the transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformModel {
    /// One displacement vector per voxel.
    Dense,
    /// Cubic lattice controls at the given spacing; smooth by construction.
    Ffd { spacing_mm: f64 },
}

/// Settings for direct per-pair optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IterativeConfig {
    pub metric: MetricKind,
    pub model: TransformModel,
    pub steps: usize,
    pub lr: f64,
    pub smooth_weight: f64,
    pub metric_params: MetricParams,
    /// Scorer shape when the metric is the trained one.
    pub estimator: KldivNetConfig,
    pub estimator_lr: f64,
    pub seed: u64,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Ssd,
            model: TransformModel::Dense,
            steps: 200,
            lr: 0.2,
            smooth_weight: 0.0,
            metric_params: MetricParams::default(),
            estimator: KldivNetConfig::default(),
            estimator_lr: 1e-3,
            seed: 0,
        }
    }
}

/// Outcome of [`iterative_register`].
#[derive(Debug, Clone)]
pub struct IterativeResult {
    /// The best-scoring field seen over all steps.
    pub field: DisplacementField,
    pub best_score: f64,
    /// Similarity score after each step.
    pub history: Vec<f64>,
}

struct SingleTensor<T: Scalar>(Tensor<T>);

impl<T: Scalar> ParamSet<T> for SingleTensor<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("transform".into(), &self.0)]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("transform".into(), &mut self.0)]
    }
}

/// Gradient ascent on a similarity over one pair's transform parameters.
///
/// Every step scores the currently warped moving image, backpropagates into
/// the transform (dense vectors or lattice controls), and keeps the
/// best-scoring field seen. With the trained metric, each step first tunes
/// the scorer on the current alignment (fresh voxel shuffle per step), then
/// moves the transform; scores recorded for selection always use the same
/// shuffle so they stay comparable across steps.
pub fn iterative_register(
    moving: &Image,
    fixed: &Image,
    cfg: &IterativeConfig,
) -> Result<IterativeResult> {
    if moving.dims != fixed.dims || moving.spacing != fixed.spacing {
        return Err(CoreError::ShapeMismatch(
            "image pair disagrees on geometry".into(),
        ));
    }
    if cfg.steps == 0 {
        return Err(CoreError::InvalidArgument("zero optimization steps".into()));
    }
    let rank = moving.dims.len();
    let moving_t = moving.to_tensor::<f64>();
    let fixed_t = fixed.to_tensor::<f64>();

    // Transform parameter tensor and the recipe turning it into a field.
    let (mut transform, spacing_vox) = match cfg.model {
        TransformModel::Dense => {
            let mut shape = vec![1, rank];
            shape.extend_from_slice(&moving.dims);
            (SingleTensor(Tensor::<f64>::zeros(&shape)), Vec::new())
        }
        TransformModel::Ffd { spacing_mm } => {
            if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
                return Err(CoreError::InvalidArgument(
                    "lattice spacing must be positive".into(),
                ));
            }
            let spacing_vox: Vec<f64> = moving
                .spacing
                .iter()
                .map(|s| spacing_mm / s)
                .collect();
            let mut shape = vec![rank];
            for (a, &d) in moving.dims.iter().enumerate() {
                shape.push(kernels::ffd_control_dim(d, spacing_vox[a]));
            }
            (SingleTensor(Tensor::<f64>::zeros(&shape)), spacing_vox)
        }
    };
    let mut adam = AdamState::new(&transform, cfg.lr);
    let mut estimator = KldivNetParams::<f64>::init(&cfg.estimator, cfg.seed);
    let mut est_adam = AdamState::new(&estimator, cfg.estimator_lr);

    let mut best_score = f64::NEG_INFINITY;
    let mut best_field: Option<DisplacementField> = None;
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        // Scorer update first (trained metric only), on the frozen field.
        if cfg.metric == MetricKind::Dv {
            let dense = match cfg.model {
                TransformModel::Dense => transform.0.clone(),
                TransformModel::Ffd { .. } => {
                    kernels::ffd_interp_forward(&transform.0, &moving.dims, &spacing_vox)
                }
            };
            let moved_now = kernels::warp_forward(&moving_t, &dense);
            let tape = Tape::new();
            let vars = estimator.bind(&tape);
            let moved = tape.input(moved_now);
            let fx = tape.input(fixed_t.clone());
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(step as u64));
            let shuffled = tape.input(shuffle_voxels(&fixed_t, &mut shuffle_rng));
            let s = dv_similarity(&vars, moved, fx, shuffled)?;
            let grads = tape.backward(s.neg());
            let glist: Vec<Tensor<f64>> = vars
                .ordered()
                .iter()
                .map(|v| grads.get_or_zeros(*v))
                .collect();
            est_adam.step(&mut estimator, &glist);
        }

        // Transform update.
        let tape = Tape::new();
        let leaf = tape.input(transform.0.clone());
        let field = match cfg.model {
            TransformModel::Dense => leaf,
            TransformModel::Ffd { .. } => leaf.ffd_interp(&moving.dims, &spacing_vox),
        };
        let moving_in = tape.input(moving_t.clone());
        let fixed_in = tape.input(fixed_t.clone());
        let moved = moving_in.warp(field);
        let score = match cfg.metric {
            MetricKind::Dv => {
                let vars = estimator.bind(&tape);
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let shuffled = tape.input(shuffle_voxels(&fixed_t, &mut rng));
                dv_similarity(&vars, moved, fixed_in, shuffled)?
            }
            m => classic_score(m, moved, fixed_in, &cfg.metric_params)?,
        };
        let loss = if cfg.smooth_weight != 0.0 {
            score
                .neg()
                .add(smoothness_value(field).scale(cfg.smooth_weight))
        } else {
            score.neg()
        };
        let score_val = score.item();
        if !score_val.is_finite() {
            return Err(CoreError::NonFinite {
                context: "similarity score".into(),
                iteration: step,
            });
        }
        history.push(score_val);
        if score_val > best_score {
            best_score = score_val;
            let dense = field.value();
            best_field = Some(DisplacementField::from_tensor(
                &dense,
                moving.spacing.clone(),
            )?);
        }

        let grads = tape.backward(loss);
        let g = grads.get_or_zeros(leaf);
        adam.step(&mut transform, &[g]);
    }

    Ok(IterativeResult {
        field: best_field.expect("at least one step ran"),
        best_score,
        history,
    })
}
