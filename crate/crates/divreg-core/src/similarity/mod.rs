//! Intensity-based similarity measures between images.
//!
//! Three differentiable measures share the tape machinery: mean squared
//! difference, locally normalized cross-correlation, and mutual information
//! with Parzen-window density estimation. The `discrete` submodule holds
//! exact counterparts on finite distributions that the estimators are tested
//! against. Conventions: correlation and mutual information are similarities
//! (higher is better), squared difference is a dissimilarity.

pub mod discrete;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Scalar, Tape, Tensor, Value};
use crate::error::{CoreError, Result};
use crate::image::Image;

pub use discrete::{
    dv_bound_discrete, dv_optimal_phi, kl_discrete, mi_discrete, JointTable, ProbTable,
};

/// Variance-product regularizer in the correlation denominator.
pub const LNCC_EPS: f64 = 1e-5;
/// Additive guard inside mutual-information logarithms.
pub const MI_LOG_GUARD: f64 = 1e-12;
/// Side length of the default local correlation window.
pub const DEFAULT_LNCC_WINDOW: usize = 9;

/// Which similarity drives a registration or sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Mean squared intensity difference.
    Ssd,
    /// Locally normalized cross-correlation.
    Lncc,
    /// Mutual information, Parzen-window estimate.
    Mi,
    /// Trained divergence estimator.
    Dv,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MetricKind::Ssd => "ssd",
            MetricKind::Lncc => "lncc",
            MetricKind::Mi => "mi",
            MetricKind::Dv => "dv",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MetricKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssd" => Ok(MetricKind::Ssd),
            "lncc" => Ok(MetricKind::Lncc),
            "mi" => Ok(MetricKind::Mi),
            "dv" => Ok(MetricKind::Dv),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown metric '{other}', expected ssd|lncc|mi|dv"
            ))),
        }
    }
}

/// Parzen-window settings for the mutual-information estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MiOptions {
    /// Number of intensity bins over `[0, 1]`.
    pub bins: usize,
    /// Kernel width in units of one bin.
    pub sigma_bins: f64,
}

impl Default for MiOptions {
    fn default() -> Self {
        Self {
            bins: 32,
            sigma_bins: 1.0,
        }
    }
}

impl MiOptions {
    fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "need at least 2 bins, got {}",
                self.bins
            )));
        }
        if !(self.sigma_bins.is_finite() && self.sigma_bins > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "kernel width must be positive, got {}",
                self.sigma_bins
            )));
        }
        // The kernel is truncated at three widths. Every intensity must keep
        // at least one bin center inside that radius, and the nearest center
        // is at most half a bin away.
        if 3.0 * self.sigma_bins < 0.5 {
            return Err(CoreError::InvalidArgument(format!(
                "kernel width {} leaves gaps between bin centers",
                self.sigma_bins
            )));
        }
        Ok(())
    }
}

/// Mean squared intensity difference. Lower is better; zero iff identical.
pub fn ssd<'t, T: Scalar>(a: Value<'t, T>, b: Value<'t, T>) -> Value<'t, T> {
    assert_eq!(a.shape(), b.shape(), "ssd operands must have equal shapes");
    let d = a.sub(b);
    d.mul(d).reduce_mean()
}

/// Locally normalized cross-correlation, averaged over all positions.
///
/// Within a `window`-wide box around each voxel (truncated at the image
/// border) the squared covariance of the two images is divided by the
/// product of their variances plus [`LNCC_EPS`]. The result lies in `[0, 1]`
/// up to the regularizer; affinely related images score close to one.
pub fn lncc<'t, T: Scalar>(
    a: Value<'t, T>,
    b: Value<'t, T>,
    window: usize,
) -> Result<Value<'t, T>> {
    let shape = a.shape();
    if shape != b.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "lncc operands {:?} vs {:?}",
            shape,
            b.shape()
        )));
    }
    if shape.len() < 3 {
        return Err(CoreError::Dimension(format!(
            "lncc expects [n, c, spatial...], got {shape:?}"
        )));
    }
    if window.is_multiple_of(2) || window == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "correlation window must be odd, got {window}"
        )));
    }
    if let Some(&min_dim) = shape[2..].iter().min() {
        if window > min_dim {
            return Err(CoreError::InvalidArgument(format!(
                "window {window} exceeds smallest spatial extent {min_dim}"
            )));
        }
    }

    let tape = a.tape();
    // Per-position sample counts of the truncated window, constant wrt inputs.
    let counts = tape.input(kernels::box_sum(&Tensor::full(&shape, T::one()), window));

    let sa = a.box_sum(window);
    let sb = b.box_sum(window);
    let saa = a.mul(a).box_sum(window);
    let sbb = b.mul(b).box_sum(window);
    let sab = a.mul(b).box_sum(window);

    let ma = sa.div(counts);
    let mb = sb.div(counts);
    let cov = sab.div(counts).sub(ma.mul(mb));
    let va = saa.div(counts).sub(ma.mul(ma));
    let vb = sbb.div(counts).sub(mb.mul(mb));

    let eps = T::from_f64(LNCC_EPS);
    let cc2 = cov.mul(cov).div(va.mul(vb).add_scalar(eps));
    Ok(cc2.reduce_mean())
}

/// Mutual information with Parzen-window density estimation, in nats.
///
/// Intensities must lie in `[0, 1]`. Each voxel spreads a Gaussian weight
/// (truncated at three widths) over bin centers `(k + 1/2) / bins`; weights
/// are renormalized per voxel, the joint density is the normalized outer
/// product of the two weight matrices, and the divergence of the joint from
/// the marginal product is read off with guarded logarithms. The estimate is
/// symmetrized so `mi_pwde(a, b)` equals `mi_pwde(b, a)` bit for bit.
/// Batched inputs `[n, 1, spatial...]` yield the mean over batch items.
pub fn mi_pwde<'t, T: Scalar>(
    a: Value<'t, T>,
    b: Value<'t, T>,
    opts: &MiOptions,
) -> Result<Value<'t, T>> {
    opts.validate()?;
    let shape = a.shape();
    if shape != b.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "mi operands {:?} vs {:?}",
            shape,
            b.shape()
        )));
    }
    if shape.len() < 3 || shape[1] != 1 {
        return Err(CoreError::Dimension(format!(
            "mi expects [n, 1, spatial...], got {shape:?}"
        )));
    }
    check_unit_range(&a.value())?;
    check_unit_range(&b.value())?;

    let batch = shape[0];
    let voxels: usize = shape[2..].iter().product();
    let mut total: Option<Value<'t, T>> = None;
    for i in 0..batch {
        let ai = a.slice_axis(0, i, 1).reshape(&[voxels, 1]);
        let bi = b.slice_axis(0, i, 1).reshape(&[voxels, 1]);
        let fwd = mi_directed(ai, bi, opts);
        let rev = mi_directed(bi, ai, opts);
        let sym = fwd.add(rev).scale(T::from_f64(0.5));
        total = Some(match total {
            Some(t) => t.add(sym),
            None => sym,
        });
    }
    Ok(total.unwrap().scale(T::from_f64(1.0 / batch as f64)))
}

/// One direction of the Parzen-window estimate on flattened `[n, 1]` columns.
fn mi_directed<'t, T: Scalar>(
    a: Value<'t, T>,
    b: Value<'t, T>,
    opts: &MiOptions,
) -> Value<'t, T> {
    let tape = a.tape();
    let n = a.shape()[0];
    let bins = opts.bins;

    let wa = parzen_weights(tape, a, opts);
    let wb = parzen_weights(tape, b, opts);

    // Joint density [bins, bins] and its marginals, all summing to one.
    let p = wa.matmul_tn(wb).scale(T::from_f64(1.0 / n as f64));
    let pa = p.mean_axes(&[1]).scale(T::from_f64(bins as f64));
    let pb = p.mean_axes(&[0]).scale(T::from_f64(bins as f64));

    let guard = T::from_f64(MI_LOG_GUARD);
    let log_p = p.add_scalar(guard).log();
    let log_pa = pa.add_scalar(guard).log();
    let log_pb = pb.add_scalar(guard).log();
    p.mul(log_p.sub(log_pa).sub(log_pb)).reduce_sum()
}

/// Per-voxel normalized kernel weights over bin centers, shape `[n, bins]`.
/// The truncation mask is computed outside the tape and enters as a constant,
/// so gradients flow only through surviving weights.
fn parzen_weights<'t, T: Scalar>(
    tape: &'t Tape<T>,
    x: Value<'t, T>,
    opts: &MiOptions,
) -> Value<'t, T> {
    let n = x.shape()[0];
    let bins = opts.bins;
    let sigma = opts.sigma_bins / bins as f64;

    let centers = tape.input(Tensor::from_fn(&[1, bins], |k| {
        T::from_f64((k as f64 + 0.5) / bins as f64)
    }));
    let mask = tape.input(truncation_mask(&x.value(), opts));

    let d = x.sub(centers);
    let w = d
        .mul(d)
        .scale(T::from_f64(-0.5 / (sigma * sigma)))
        .exp()
        .mul(mask);
    let row_sum = w.mean_axes(&[1]).scale(T::from_f64(bins as f64));
    debug_assert_eq!(w.shape(), [n, bins]);
    w.div(row_sum)
}

/// Indicator of `|x - center| <= 3 sigma`, shape `[n, bins]`.
fn truncation_mask<T: Scalar>(x: &Tensor<T>, opts: &MiOptions) -> Tensor<T> {
    let bins = opts.bins;
    let radius = 3.0 * opts.sigma_bins / bins as f64;
    let vals = x.data();
    Tensor::from_fn(&[vals.len(), bins], |i| {
        let v = vals[i / bins].as_f64();
        let c = ((i % bins) as f64 + 0.5) / bins as f64;
        if (v - c).abs() <= radius {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn check_unit_range<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    for &v in t.data() {
        let v = v.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(CoreError::InvalidArgument(format!(
                "intensity {v} outside [0, 1]; normalize first"
            )));
        }
    }
    Ok(())
}

/// Plain evaluation of [`mi_pwde`] on one sample pair without building a
/// tape, suitable for large sample counts. Same estimator, same value.
pub fn mi_pwde_eval(a: &[f64], b: &[f64], opts: &MiOptions) -> Result<f64> {
    opts.validate()?;
    if a.len() != b.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "sample runs of {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(CoreError::DegenerateInput("no samples".into()));
    }
    for &v in a.iter().chain(b) {
        if !(0.0..=1.0).contains(&v) {
            return Err(CoreError::InvalidArgument(format!(
                "intensity {v} outside [0, 1]; normalize first"
            )));
        }
    }
    Ok(0.5 * (mi_directed_eval(a, b, opts) + mi_directed_eval(b, a, opts)))
}

fn mi_directed_eval(a: &[f64], b: &[f64], opts: &MiOptions) -> f64 {
    let bins = opts.bins;
    let n = a.len();
    let mut p = vec![0.0f64; bins * bins];
    let mut row_a = vec![0.0f64; bins];
    let mut row_b = vec![0.0f64; bins];
    for (&va, &vb) in a.iter().zip(b) {
        let (lo_a, hi_a) = parzen_row(va, opts, &mut row_a);
        let (lo_b, hi_b) = parzen_row(vb, opts, &mut row_b);
        for i in lo_a..hi_a {
            let wa = row_a[i] / n as f64;
            for j in lo_b..hi_b {
                p[i * bins + j] += wa * row_b[j];
            }
        }
    }
    let mut pa = vec![0.0f64; bins];
    let mut pb = vec![0.0f64; bins];
    for i in 0..bins {
        for j in 0..bins {
            pa[i] += p[i * bins + j];
            pb[j] += p[i * bins + j];
        }
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let pij = p[i * bins + j];
            mi += pij
                * ((pij + MI_LOG_GUARD).ln()
                    - (pa[i] + MI_LOG_GUARD).ln()
                    - (pb[j] + MI_LOG_GUARD).ln());
        }
    }
    mi
}

/// Fill normalized truncated kernel weights for one value; returns the bin
/// range carrying nonzero weight.
fn parzen_row(v: f64, opts: &MiOptions, row: &mut [f64]) -> (usize, usize) {
    let bins = opts.bins;
    let sigma = opts.sigma_bins / bins as f64;
    let radius = 3.0 * sigma;
    // Centers are (k + 1/2) / bins; solve |v - c_k| <= radius for k.
    let lo = (((v - radius) * bins as f64 - 0.5).ceil().max(0.0)) as usize;
    let hi = ((((v + radius) * bins as f64 - 0.5).floor()) as usize + 1).min(bins);
    let mut sum = 0.0;
    for (k, slot) in row.iter_mut().enumerate().take(hi).skip(lo) {
        let c = (k as f64 + 0.5) / bins as f64;
        let d = v - c;
        // Mirror the masked tape kernel exactly, including the boundary.
        let w = if d.abs() <= radius {
            (-0.5 * d * d / (sigma * sigma)).exp()
        } else {
            0.0
        };
        *slot = w;
        sum += w;
    }
    for slot in row.iter_mut().take(hi).skip(lo) {
        *slot /= sum;
    }
    (lo, hi)
}

/// Hard-binned joint distribution of two images with intensities in `[0, 1]`.
/// Bin `k` covers `[k/bins, (k+1)/bins)`, the last bin includes `1`.
pub fn joint_histogram(a: &Image, b: &Image, bins: usize) -> Result<JointTable> {
    if a.dims != b.dims {
        return Err(CoreError::ShapeMismatch(format!(
            "images {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    if bins < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let mut counts = vec![0u64; bins * bins];
    for (&va, &vb) in a.data.iter().zip(&b.data) {
        let (va, vb) = (va as f64, vb as f64);
        if !(0.0..=1.0).contains(&va) || !(0.0..=1.0).contains(&vb) {
            return Err(CoreError::InvalidArgument(
                "intensities outside [0, 1]; normalize first".into(),
            ));
        }
        let i = ((va * bins as f64) as usize).min(bins - 1);
        let j = ((vb * bins as f64) as usize).min(bins - 1);
        counts[i * bins + j] += 1;
    }
    JointTable::from_counts(bins, bins, &counts)
}

/// Mutual information of the hard-binned joint distribution, in nats.
pub fn mi_histogram(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    Ok(mi_discrete(&joint_histogram(a, b, bins)?))
}
