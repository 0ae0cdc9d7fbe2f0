//! Similarity-versus-offset sweeps.
//!
//! A sweep slides the moving image over a grid of integer translations and
//! scores each shifted copy against the fixed image. For a well-behaved
//! similarity on an aligned pair the table peaks at zero offset; how sharply
//! it falls off, and whether spurious peaks appear, says a lot about how
//! optimizable the measure is. Closed-form metrics are evaluated directly.
//! The trained metric gets a two-stage protocol: one scorer is warmed up on
//! randomly shifted copies, then a clone of it is briefly specialized per
//! offset and its smoothed bound is reported.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::kldivnet::{dv_similarity, shuffle_voxels, KldivNetConfig, KldivNetParams};
use crate::similarity::MetricKind;
use crate::train::{classic_score, AdamState, MetricParams};
use crate::transform::{warp_image, DisplacementField};

/// Settings for [`sweep_translations`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub metric: MetricKind,
    /// Largest offset probed along each axis, voxels.
    pub max_offset: usize,
    /// Grid step between probed offsets, voxels.
    pub step: usize,
    pub metric_params: MetricParams,
    /// Scorer shape (trained metric only).
    pub estimator: KldivNetConfig,
    pub estimator_lr: f64,
    /// Scorer updates on randomly shifted copies before the sweep.
    pub warm_steps: usize,
    /// Scorer updates specializing on each probed offset.
    pub refine_steps: usize,
    /// Decay of the reported bound's running average during refinement.
    pub score_decay: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Lncc,
            max_offset: 10,
            step: 2,
            metric_params: MetricParams::default(),
            estimator: KldivNetConfig::default(),
            estimator_lr: 1e-3,
            warm_steps: 300,
            refine_steps: 100,
            score_decay: 0.9,
            seed: 0,
        }
    }
}

/// One probed offset and its similarity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub offset: Vec<isize>,
    pub score: f64,
}

/// The full sweep, row-major over the offset grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub metric: MetricKind,
    /// The one-dimensional offset list each axis runs over.
    pub axis: Vec<isize>,
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    /// The best-scoring point; ties go to the earliest row.
    pub fn argmax(&self) -> &SweepPoint {
        self.points
            .iter()
            .reduce(|best, p| if p.score > best.score { p } else { best })
            .expect("sweep tables are never empty")
    }

    /// Largest absolute component of the best-scoring offset, voxels.
    /// Zero means the peak sits exactly at perfect alignment.
    pub fn peak_error(&self) -> usize {
        self.argmax()
            .offset
            .iter()
            .map(|&o| o.unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    /// Render as CSV. `meta` pairs become leading `# key: value` lines.
    pub fn to_csv(&self, meta: &[(String, String)]) -> String {
        let rank = self.points.first().map_or(0, |p| p.offset.len());
        let mut out = String::new();
        out.push_str(&format!("# metric: {}\n", self.metric));
        for (k, v) in meta {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        for a in 0..rank {
            out.push_str(&format!("offset_{a},"));
        }
        out.push_str("score\n");
        for p in &self.points {
            for o in &p.offset {
                out.push_str(&format!("{o},"));
            }
            out.push_str(&format!("{}\n", p.score));
        }
        out
    }
}

/// Shift an image by a constant displacement (pull convention: the output
/// at `x` samples the input at `x + offset`). Border samples clamp.
pub fn translate_image(img: &Image, offset: &[f64]) -> Result<Image> {
    if offset.len() != img.dims.len() {
        return Err(CoreError::Dimension(format!(
            "offset rank {} vs image rank {}",
            offset.len(),
            img.dims.len()
        )));
    }
    let vox: usize = img.dims.iter().product();
    let mut vectors = Vec::with_capacity(offset.len() * vox);
    for &o in offset {
        vectors.extend(std::iter::repeat_n(o as f32, vox));
    }
    let field = DisplacementField::new(img.dims.clone(), img.spacing.clone(), vectors)?;
    warp_image(img, &field)
}

fn offset_axis(max_offset: usize, step: usize) -> Result<Vec<isize>> {
    if step == 0 {
        return Err(CoreError::InvalidArgument("zero sweep step".into()));
    }
    let m = max_offset as isize;
    let axis: Vec<isize> = (-m..=m).step_by(step).collect();
    if *axis.last().unwrap() != m {
        return Err(CoreError::InvalidArgument(format!(
            "step {step} does not land on the end offset {max_offset}"
        )));
    }
    Ok(axis)
}

fn offset_grid(axis: &[isize], rank: usize) -> Vec<Vec<isize>> {
    let mut grid = vec![Vec::new()];
    for _ in 0..rank {
        let mut next = Vec::with_capacity(grid.len() * axis.len());
        for prefix in &grid {
            for &o in axis {
                let mut row = prefix.clone();
                row.push(o);
                next.push(row);
            }
        }
        grid = next;
    }
    grid
}

/// One scorer ascent step on a fixed pair; returns the bound's value.
fn scorer_step(
    est: &mut KldivNetParams<f64>,
    adam: &mut AdamState<f64>,
    moving_t: &Tensor<f64>,
    fixed_t: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let tape = Tape::new();
    let vars = est.bind(&tape);
    let m = tape.input(moving_t.clone());
    let f = tape.input(fixed_t.clone());
    let shuffled = tape.input(shuffle_voxels(fixed_t, rng));
    let s = dv_similarity(&vars, m, f, shuffled)?;
    let value = s.item();
    if !value.is_finite() {
        return Err(CoreError::NonFinite {
            context: "sweep scorer bound".into(),
            iteration: adam.step_count() as usize,
        });
    }
    let grads = tape.backward(s.neg());
    let glist: Vec<Tensor<f64>> = vars
        .ordered()
        .iter()
        .map(|v| grads.get_or_zeros(*v))
        .collect();
    adam.step(est, &glist);
    Ok(value)
}

/// Score every translation on the offset grid.
///
/// `moving` and `fixed` are expected to be aligned; the sweep asks how the
/// similarity responds as alignment is broken on purpose.
pub fn sweep_translations(moving: &Image, fixed: &Image, cfg: &SweepConfig) -> Result<SweepTable> {
    if moving.dims != fixed.dims || moving.spacing != fixed.spacing {
        return Err(CoreError::ShapeMismatch(
            "image pair disagrees on geometry".into(),
        ));
    }
    let rank = moving.dims.len();
    let axis = offset_axis(cfg.max_offset, cfg.step)?;
    let grid = offset_grid(&axis, rank);
    let fixed_t = fixed.to_tensor::<f64>();

    let mut warm = None;
    if cfg.metric == MetricKind::Dv {
        // Warm the scorer on randomly shifted copies so every offset's
        // refinement starts from features that already understand the
        // two intensity distributions.
        let mut est = KldivNetParams::<f64>::init(&cfg.estimator, cfg.seed);
        let mut adam = AdamState::new(&est, cfg.estimator_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        for _ in 0..cfg.warm_steps {
            let off: Vec<f64> = (0..rank)
                .map(|_| axis[rng.random_range(0..axis.len())] as f64)
                .collect();
            let shifted = translate_image(moving, &off)?;
            let shifted_t = shifted.to_tensor::<f64>();
            scorer_step(&mut est, &mut adam, &shifted_t, &fixed_t, &mut rng)?;
        }
        warm = Some(est);
    }

    let mut points = Vec::with_capacity(grid.len());
    for (idx, off) in grid.iter().enumerate() {
        let off_f: Vec<f64> = off.iter().map(|&o| o as f64).collect();
        let shifted = translate_image(moving, &off_f)?;
        let score = match &warm {
            Some(warm_est) => {
                let mut est = warm_est.clone();
                let mut adam = AdamState::new(&est, cfg.estimator_lr);
                let mut rng =
                    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2).wrapping_add(idx as u64));
                let shifted_t = shifted.to_tensor::<f64>();
                let mut ema = None;
                for _ in 0..cfg.refine_steps.max(1) {
                    let s = scorer_step(&mut est, &mut adam, &shifted_t, &fixed_t, &mut rng)?;
                    ema = Some(match ema {
                        None => s,
                        Some(e) => cfg.score_decay * e + (1.0 - cfg.score_decay) * s,
                    });
                }
                ema.unwrap()
            }
            None => {
                let tape = Tape::new();
                let m = tape.input(shifted.to_tensor::<f64>());
                let f = tape.input(fixed_t.clone());
                let s = classic_score(cfg.metric, m, f, &cfg.metric_params)?;
                let value = s.item();
                if !value.is_finite() {
                    return Err(CoreError::NonFinite {
                        context: "sweep similarity".into(),
                        iteration: idx,
                    });
                }
                value
            }
        };
        points.push(SweepPoint {
            offset: off.clone(),
            score,
        });
    }

    Ok(SweepTable {
        metric: cfg.metric,
        axis,
        points,
    })
}
