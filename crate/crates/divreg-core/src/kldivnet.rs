//! Trainable divergence estimation.
//!
//! A learned test function turns the variational lower bound
//! `E_joint[D] - log E_marginal[exp(D)]` into a similarity: the tighter the
//! bound, the better it separates aligned image pairs from shuffled ones.
//! Two flavors live here. [`KldivNetParams`] is a two-branch pointwise
//! network over image pairs whose bound serves as a registration loss.
//! [`estimate_kl`] trains a small scorer on raw sample vectors and reports
//! the bound itself, which converges to the divergence between the two
//! sampled distributions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Scalar, Tape, Tensor, Value};
use crate::error::{CoreError, Result};
use crate::train::{ema_update, AdamState, ParamSet};

/// Weights of one pointwise (kernel size 1) convolution.
#[derive(Debug, Clone)]
pub struct PointwiseConv<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> PointwiseConv<T> {
    /// Kaiming-uniform weights for a leaky rectifier with the given negative
    /// slope. Draws happen in f64 so every precision shares initial values.
    fn init(ci: usize, co: usize, spatial_rank: usize, slope: f64, rng: &mut ChaCha8Rng) -> Self {
        let gain2 = 2.0 / (1.0 + slope * slope);
        let bound = (3.0 * gain2 / ci as f64).sqrt();
        let mut w_shape = vec![co, ci];
        w_shape.extend(std::iter::repeat_n(1, spatial_rank));
        let n: usize = w_shape.iter().product();
        let w = Tensor::new(
            w_shape,
            (0..n)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect(),
        );
        let bb = 1.0 / (ci as f64).sqrt();
        let b = Tensor::new(
            vec![co],
            (0..co)
                .map(|_| T::from_f64(rng.random_range(-bb..bb)))
                .collect(),
        );
        Self { w, b }
    }
}

/// Shape of the pair-scoring network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KldivNetConfig {
    /// Spatial rank of the images (2 or 3).
    pub spatial_rank: usize,
    /// Channels of each input image.
    pub in_channels: usize,
    /// Widths of the two per-branch blocks.
    pub branch_channels: [usize; 2],
    /// Width of the hidden head block.
    pub head_channels: usize,
    /// Negative slope of every leaky rectifier.
    pub leaky_slope: f64,
    /// Downsampling factor applied after each branch block.
    pub pool: usize,
}

impl Default for KldivNetConfig {
    fn default() -> Self {
        Self {
            spatial_rank: 2,
            in_channels: 1,
            branch_channels: [16, 16],
            head_channels: 16,
            leaky_slope: 0.2,
            pool: 2,
        }
    }
}

impl KldivNetConfig {
    /// Overall downsampling factor from input to score map.
    pub fn total_pool(&self) -> usize {
        self.pool * self.pool
    }

    /// Check that an input `[n, c, spatial...]` shape fits the network.
    pub fn validate_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 + self.spatial_rank {
            return Err(CoreError::Dimension(format!(
                "expected [n, c, {} spatial dims], got {shape:?}",
                self.spatial_rank
            )));
        }
        if shape[1] != self.in_channels {
            return Err(CoreError::ShapeMismatch(format!(
                "expected {} channels, got {}",
                self.in_channels, shape[1]
            )));
        }
        let total = self.total_pool();
        for &d in &shape[2..] {
            if d % total != 0 || d == 0 {
                return Err(CoreError::Dimension(format!(
                    "spatial extent {d} not divisible by downsampling factor {total}"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the pair-scoring network: two independent branches (one per
/// image) and a shared head over their concatenated features.
#[derive(Debug, Clone)]
pub struct KldivNetParams<T: Scalar> {
    pub cfg: KldivNetConfig,
    pub branch_a: Vec<PointwiseConv<T>>,
    pub branch_b: Vec<PointwiseConv<T>>,
    pub head: Vec<PointwiseConv<T>>,
}

impl<T: Scalar> KldivNetParams<T> {
    pub fn init(cfg: &KldivNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cfg.spatial_rank;
        let s = cfg.leaky_slope;
        let [c1, c2] = cfg.branch_channels;
        let branch_a = vec![
            PointwiseConv::init(cfg.in_channels, c1, r, s, &mut rng),
            PointwiseConv::init(c1, c2, r, s, &mut rng),
        ];
        let branch_b = vec![
            PointwiseConv::init(cfg.in_channels, c1, r, s, &mut rng),
            PointwiseConv::init(c1, c2, r, s, &mut rng),
        ];
        let head = vec![
            PointwiseConv::init(2 * c2, cfg.head_channels, r, s, &mut rng),
            // The final layer is linear so scores cover the whole real line.
            PointwiseConv::init(cfg.head_channels, 1, r, 1.0, &mut rng),
        ];
        Self {
            cfg: cfg.clone(),
            branch_a,
            branch_b,
            head,
        }
    }

    /// Copy the parameters onto a tape for one differentiable forward pass.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> KldivNetVars<'t, T> {
        let put = |layers: &[PointwiseConv<T>]| {
            layers
                .iter()
                .map(|l| (tape.input(l.w.clone()), tape.input(l.b.clone())))
                .collect()
        };
        KldivNetVars {
            cfg: self.cfg.clone(),
            branch_a: put(&self.branch_a),
            branch_b: put(&self.branch_b),
            head: put(&self.head),
        }
    }
}

fn layer_names(prefix: &str, n: usize) -> impl Iterator<Item = (String, String)> + '_ {
    (0..n).map(move |i| (format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b")))
}

impl<T: Scalar> ParamSet<T> for KldivNetParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (group, name) in [
            (&self.branch_a, "branch_a"),
            (&self.branch_b, "branch_b"),
            (&self.head, "head"),
        ] {
            for ((wn, bn), l) in layer_names(name, group.len()).zip(group.iter()) {
                out.push((wn, &l.w));
                out.push((bn, &l.b));
            }
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (group, name) in [
            (&mut self.branch_a, "branch_a"),
            (&mut self.branch_b, "branch_b"),
            (&mut self.head, "head"),
        ] {
            let names: Vec<_> = layer_names(name, group.len()).collect();
            for ((wn, bn), l) in names.into_iter().zip(group.iter_mut()) {
                out.push((wn, &mut l.w));
                out.push((bn, &mut l.b));
            }
        }
        out
    }
}

/// Tape-bound copy of [`KldivNetParams`] for one forward/backward pass.
pub struct KldivNetVars<'t, T: Scalar> {
    pub cfg: KldivNetConfig,
    branch_a: Vec<(Value<'t, T>, Value<'t, T>)>,
    branch_b: Vec<(Value<'t, T>, Value<'t, T>)>,
    head: Vec<(Value<'t, T>, Value<'t, T>)>,
}

impl<'t, T: Scalar> KldivNetVars<'t, T> {
    /// Tape values in the order of [`ParamSet::named_tensors`], for pairing
    /// optimizer state with gradients.
    pub fn ordered(&self) -> Vec<Value<'t, T>> {
        self.branch_a
            .iter()
            .chain(&self.branch_b)
            .chain(&self.head)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }

    /// Score map `D(a, b)` of shape `[n, 1, spatial / pool^2 ...]`.
    pub fn score_map(&self, a: Value<'t, T>, b: Value<'t, T>) -> Value<'t, T> {
        self.score_map_probed(a, b, &mut Vec::new())
    }

    /// As [`Self::score_map`], also collecting every rectifier input so
    /// callers can verify a forward pass stays away from activation kinks.
    pub fn score_map_probed(
        &self,
        a: Value<'t, T>,
        b: Value<'t, T>,
        preacts: &mut Vec<Value<'t, T>>,
    ) -> Value<'t, T> {
        let slope = T::from_f64(self.cfg.leaky_slope);
        let pool = self.cfg.pool;
        let branch = |layers: &[(Value<'t, T>, Value<'t, T>)],
                      x: Value<'t, T>,
                      preacts: &mut Vec<Value<'t, T>>| {
            let mut h = x;
            for &(w, b) in layers {
                let z = h.conv(w, b, 1);
                preacts.push(z);
                h = z.leaky_relu(slope).avg_pool(pool);
            }
            h
        };
        let fa = branch(&self.branch_a, a, preacts);
        let fb = branch(&self.branch_b, b, preacts);
        let merged = fa.concat_channels(fb);
        let (w0, b0) = self.head[0];
        let z = merged.conv(w0, b0, 1);
        preacts.push(z);
        let h = z.leaky_relu(slope);
        let (w1, b1) = self.head[1];
        h.conv(w1, b1, 1)
    }
}

/// Variational similarity of an image pair under the current scorer:
/// the mean score of true pairs minus the log-mean-exp score against a
/// voxel-shuffled partner whose marginal distribution is unchanged.
/// Scores are pooled over the whole batch so one bound covers all pairs.
pub fn dv_similarity<'t, T: Scalar>(
    vars: &KldivNetVars<'t, T>,
    a: Value<'t, T>,
    b: Value<'t, T>,
    b_shuffled: Value<'t, T>,
) -> Result<Value<'t, T>> {
    let shape = a.shape();
    vars.cfg.validate_input(&shape)?;
    if shape != b.shape() || shape != b_shuffled.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "pair scoring needs equal shapes, got {:?} / {:?} / {:?}",
            shape,
            b.shape(),
            b_shuffled.shape()
        )));
    }
    let joint = vars.score_map(a, b).reduce_mean();
    let marginal = vars.score_map(a, b_shuffled).log_mean_exp();
    Ok(joint.sub(marginal))
}

/// Convenience wrapper that shuffles `b`'s voxels with a seeded stream and
/// places the result on the tape as a constant.
pub fn dv_similarity_seeded<'t, T: Scalar>(
    vars: &KldivNetVars<'t, T>,
    a: Value<'t, T>,
    b: Value<'t, T>,
    seed: u64,
) -> Result<Value<'t, T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shuffled = a.tape().input(shuffle_voxels(&b.value(), &mut rng));
    dv_similarity(vars, a, b, shuffled)
}

/// Permute the spatial positions of each batch item independently, keeping
/// channel tuples together. The per-item intensity distribution (the
/// marginal) is exactly preserved; spatial correspondence is destroyed.
pub fn shuffle_voxels<T: Scalar>(t: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let shape = t.shape();
    assert!(shape.len() >= 3, "expected [n, c, spatial...]");
    let (n, c) = (shape[0], shape[1]);
    let vox: usize = shape[2..].iter().product();
    let mut out = t.clone();
    for item in 0..n {
        let mut perm: Vec<usize> = (0..vox).collect();
        // Fisher-Yates, seeded, independent per item.
        for i in (1..vox).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let base = item * c * vox;
        for ch in 0..c {
            let off = base + ch * vox;
            for (dst, &src) in perm.iter().enumerate() {
                out.data_mut()[off + dst] = t.data()[off + src];
            }
        }
    }
    out
}

/// A set of `len` points in `dim` dimensions, row-major.
#[derive(Debug, Clone)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
}

impl SampleSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(CoreError::ShapeMismatch(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidArgument(
                "samples must be finite".into(),
            ));
        }
        Ok(Self { dim, data })
    }

    /// One-dimensional convenience constructor.
    pub fn scalars(values: Vec<f64>) -> Result<Self> {
        Self::new(1, values)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Gather rows into a `[k, dim, 1]` tensor for the scorer.
    fn gather(&self, idx: &[usize]) -> Tensor<f64> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            data.extend_from_slice(row);
        }
        Tensor::new(vec![idx.len(), self.dim, 1], data)
    }
}

/// Scorer over raw sample vectors: pointwise convolutions acting as a
/// per-sample multilayer perceptron.
#[derive(Debug, Clone)]
pub struct MlpParams<T: Scalar> {
    pub layers: Vec<PointwiseConv<T>>,
    pub leaky_slope: f64,
}

impl<T: Scalar> MlpParams<T> {
    /// Hidden widths in `channels`, final linear layer to one output.
    pub fn init(input_dim: usize, channels: &[usize], leaky_slope: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(channels.len() + 1);
        let mut ci = input_dim;
        for &co in channels {
            layers.push(PointwiseConv::init(ci, co, 1, leaky_slope, &mut rng));
            ci = co;
        }
        layers.push(PointwiseConv::init(ci, 1, 1, 1.0, &mut rng));
        Self {
            layers,
            leaky_slope,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> MlpVars<'t, T> {
        MlpVars {
            slope: T::from_f64(self.leaky_slope),
            layers: self
                .layers
                .iter()
                .map(|l| (tape.input(l.w.clone()), tape.input(l.b.clone())))
                .collect(),
        }
    }

    /// Forward pass without a tape, for scoring large sets cheaply.
    fn score_plain(&self, x: &Tensor<T>) -> Vec<T> {
        let slope = T::from_f64(self.leaky_slope);
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = kernels::conv_forward(&h, &l.w, &l.b, 1);
            if i < last {
                for v in h.data_mut() {
                    if *v < T::zero() {
                        *v = *v * slope;
                    }
                }
            }
        }
        h.into_data()
    }
}

impl<T: Scalar> ParamSet<T> for MlpParams<T> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        layer_names("layer", self.layers.len())
            .zip(&self.layers)
            .flat_map(|((wn, bn), l)| [(wn, &l.w), (bn, &l.b)])
            .collect()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<_> = layer_names("layer", self.layers.len()).collect();
        names
            .into_iter()
            .zip(self.layers.iter_mut())
            .flat_map(|((wn, bn), l)| [(wn, &mut l.w), (bn, &mut l.b)])
            .collect()
    }
}

/// Tape-bound copy of [`MlpParams`].
pub struct MlpVars<'t, T: Scalar> {
    slope: T,
    layers: Vec<(Value<'t, T>, Value<'t, T>)>,
}

impl<'t, T: Scalar> MlpVars<'t, T> {
    pub fn ordered(&self) -> Vec<Value<'t, T>> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// Scores of shape `[k, 1, 1]` for input `[k, dim, 1]`.
    pub fn score(&self, x: Value<'t, T>) -> Value<'t, T> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.conv(w, b, 1);
            if i < last {
                h = h.leaky_relu(self.slope);
            }
        }
        h
    }
}

/// Settings for [`estimate_kl`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct KlEstimateOptions {
    /// Hidden widths of the scorer.
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Decay of the averaged parameters used for the final readout.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for KlEstimateOptions {
    fn default() -> Self {
        Self {
            channels: vec![64, 64],
            leaky_slope: 0.2,
            lr: 1e-3,
            steps: 2000,
            batch: 512,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

/// Result of [`estimate_kl`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlEstimate {
    /// Bound of the averaged scorer over the full sample sets, in nats.
    pub nats: f64,
    /// Minibatch bound after each optimization step.
    pub history: Vec<f64>,
}

/// Estimate `KL(mu || lam)` from samples by maximizing the variational
/// bound with Adam. The returned value evaluates an exponentially averaged
/// copy of the scorer on the complete sets, which damps minibatch noise;
/// the per-step history shows the optimization itself.
pub fn estimate_kl(
    mu: &SampleSet,
    lam: &SampleSet,
    opts: &KlEstimateOptions,
) -> Result<KlEstimate> {
    if mu.dim() != lam.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "sample dimensions {} vs {}",
            mu.dim(),
            lam.dim()
        )));
    }
    if opts.batch < 64 {
        return Err(CoreError::InvalidArgument(format!(
            "batch {} too small for a stable bound, need at least 64",
            opts.batch
        )));
    }
    if mu.len() < opts.batch || lam.len() < opts.batch {
        return Err(CoreError::DegenerateInput(format!(
            "need at least {} samples per set, got {} and {}",
            opts.batch,
            mu.len(),
            lam.len()
        )));
    }
    if opts.steps == 0 {
        return Err(CoreError::InvalidArgument("zero optimization steps".into()));
    }

    let mut params = MlpParams::<f64>::init(mu.dim(), &opts.channels, opts.leaky_slope, opts.seed);
    let mut averaged = params.clone();
    let mut adam = AdamState::new(&params, opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let mu_idx: Vec<usize> = (0..opts.batch)
            .map(|_| rng.random_range(0..mu.len()))
            .collect();
        let lam_idx: Vec<usize> = (0..opts.batch)
            .map(|_| rng.random_range(0..lam.len()))
            .collect();

        let tape = Tape::new();
        let vars = params.bind(&tape);
        let joint = vars.score(tape.input(mu.gather(&mu_idx))).reduce_mean();
        let marginal = vars.score(tape.input(lam.gather(&lam_idx))).log_mean_exp();
        let bound = joint.sub(marginal);
        let value = bound.item();
        if !value.is_finite() {
            return Err(CoreError::NonFinite {
                context: "divergence bound".into(),
                iteration: step,
            });
        }
        history.push(value);

        let loss = bound.neg();
        let grads = tape.backward(loss);
        let grad_list: Vec<Tensor<f64>> = vars
            .ordered()
            .iter()
            .map(|v| grads.get_or_zeros(*v))
            .collect();
        adam.step(&mut params, &grad_list);
        ema_update(&mut averaged, &params, opts.ema_decay);
    }

    Ok(KlEstimate {
        nats: full_bound(&averaged, mu, lam),
        history,
    })
}

/// Bound of a fixed scorer over complete sample sets, computed in chunks.
fn full_bound(params: &MlpParams<f64>, mu: &SampleSet, lam: &SampleSet) -> f64 {
    let score_all = |set: &SampleSet| -> Vec<f64> {
        let mut scores = Vec::with_capacity(set.len());
        for chunk in (0..set.len()).collect::<Vec<_>>().chunks(8192) {
            scores.extend(params.score_plain(&set.gather(chunk)));
        }
        scores
    };
    let mu_scores = score_all(mu);
    let lam_scores = score_all(lam);
    let mean: f64 = mu_scores.iter().sum::<f64>() / mu_scores.len() as f64;
    let max = lam_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = lam_scores.iter().map(|s| (s - max).exp()).sum::<f64>();
    mean - (max + (lse / lam_scores.len() as f64).ln())
}
