//! Finite-difference verification of reverse-mode gradients.
//!
//! Checks run in f64. The reported error for each coordinate is
//! `|analytic - numeric| / max(1, |analytic|, |numeric|)`; the suite-level
//! result is the maximum over all coordinates of all inputs.
//!
//! Piecewise-linear primitives (leaky_relu, interpolation) have kinks where
//! central differences straddle two branches. Callers exclude those sites by
//! re-sampling inputs until a guard predicate holds, rather than loosening
//! tolerances; see `resample_until`.

use super::tape::{Tape, Value};
use super::tensor::Tensor;

/// Relative error between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Maximum relative error of the reverse-mode gradient of `f` with respect to
/// every coordinate of every input, against central differences with step
/// `eps`. `f` must return a one-element value.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Value<'t, f64>]) -> Value<'t, f64>,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vals: Vec<Value<'_, f64>> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        f(&tape, &vals).item()
    };

    // analytic gradients
    let tape = Tape::new();
    let vals: Vec<Value<'_, f64>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&tape, &vals);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor<f64>> = vals.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            work[ti].data_mut()[i] = x0 + eps;
            let fp = eval(&work);
            work[ti].data_mut()[i] = x0 - eps;
            let fm = eval(&work);
            work[ti].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[ti].data()[i], numeric));
        }
    }
    worst
}

/// Single-input convenience wrapper around `grad_check_multi`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, Value<'t, f64>) -> Value<'t, f64>,
{
    grad_check_multi(|tape, vals| f(tape, vals[0]), std::slice::from_ref(input), eps)
}

/// Draw candidates until `guard` accepts one. Used to keep finite-difference
/// probes away from kinks of piecewise-linear primitives; panics after 1000
/// rejections since that signals a broken guard, not bad luck.
pub fn resample_until<G>(mut draw: impl FnMut() -> Vec<Tensor<f64>>, guard: G) -> Vec<Tensor<f64>>
where
    G: Fn(&[Tensor<f64>]) -> bool,
{
    for _ in 0..1000 {
        let cand = draw();
        if guard(&cand) {
            return cand;
        }
    }
    panic!("resample_until: guard rejected 1000 consecutive draws");
}

/// True when every coordinate keeps at least `margin` distance from the
/// nearest kink of `x -> max(x, 0)`-style activations (the kink is at zero).
pub fn away_from_zero(t: &Tensor<f64>, margin: f64) -> bool {
    t.data().iter().all(|&v| v.abs() > margin)
}

/// True when adding `field` to the voxel grid keeps every sample coordinate
/// at least `margin` away from integers (interpolation kinks) and inside the
/// image so clamping branches stay inactive.
pub fn field_away_from_kinks(field: &Tensor<f64>, margin: f64) -> bool {
    let fs = field.shape();
    let rank = fs[1];
    let sp = &fs[2..];
    let vox: usize = sp.iter().product();
    let strides = super::tensor::strides_of(sp);
    for n in 0..fs[0] {
        for a in 0..rank {
            for p in 0..vox {
                let coord = (p / strides[a]) % sp[a];
                let s = coord as f64 + field.data()[(n * rank + a) * vox + p];
                if s < margin || s > (sp[a] - 1) as f64 - margin {
                    return false;
                }
                let frac = s - s.floor();
                if frac < margin || frac > 1.0 - margin {
                    return false;
                }
            }
        }
    }
    true
}
