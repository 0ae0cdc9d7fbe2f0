//! Synthetic registration pairs with known ground truth.
//!
//! A fixed two-dimensional scene (textured background, two shaded ellipses,
//! a small disc, each with its own label) is deformed by a random smooth
//! lattice field to produce the moving image. Because the generating field
//! is returned alongside the images, recovered transforms can be judged
//! against exact correspondence instead of visual plausibility.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::{Image, LabelMap};
use crate::transform::{ffd_to_dvf, sample_random_ffd, warp_image, warp_labels, DisplacementField};

/// Intensity remapping between the two images of a pair, simulating a second
/// acquisition protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remap {
    /// Same protocol: intensities carry over unchanged.
    Identity,
    /// Non-monotone protocol change: `v < 1/2` maps to `1 - 2v`, the rest to
    /// `2v - 1`. Dark and bright both land on bright, so no single affine or
    /// monotone relation links the two images.
    InvertingFold,
}

impl Remap {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Remap::Identity => v,
            Remap::InvertingFold => {
                if v < 0.5 {
                    1.0 - 2.0 * v
                } else {
                    2.0 * v - 1.0
                }
            }
        }
    }
}

impl std::str::FromStr for Remap {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Remap::Identity),
            "inverting_fold" => Ok(Remap::InvertingFold),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown remap '{other}', expected identity|inverting_fold"
            ))),
        }
    }
}

/// Settings for pair generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// Grid extents, slowest axis first. Two-dimensional only.
    pub dims: Vec<usize>,
    /// Voxel spacing in mm.
    pub spacing: Vec<f64>,
    /// Control-point spacing of the generating lattice, mm.
    pub ffd_spacing_mm: f64,
    /// Standard deviation of control-point displacements, mm.
    pub ffd_sigma_mm: f64,
    /// Standard deviation of additive intensity noise on the moving image.
    pub noise_sigma: f64,
    /// Intensity remapping applied to the moving image.
    pub remap: Remap,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 64],
            spacing: vec![1.0, 1.0],
            ffd_spacing_mm: 20.0,
            ffd_sigma_mm: 6.0,
            noise_sigma: 0.02,
            remap: Remap::Identity,
        }
    }
}

/// One synthetic registration problem.
#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub fixed: Image,
    pub fixed_labels: LabelMap,
    pub moving: Image,
    pub moving_labels: LabelMap,
    /// The field that generated the moving image: pulling the moving image
    /// through it does NOT restore the fixed image; a registration must
    /// recover (approximately) its inverse.
    pub truth: DisplacementField,
}

/// The deterministic base scene: image plus labels.
///
/// Geometry scales with the extents so any grid from 16 voxels up works.
/// Intensities stay within `[0.05, 0.95]`, leaving room for noise without
/// clamping bias. Every region carries an internal gradient (dome, linear
/// ramp, radial fade) so local structure exists everywhere a boundary is.
pub fn base_pattern(dims: &[usize], spacing: &[f64]) -> Result<(Image, LabelMap)> {
    if dims.len() != 2 {
        return Err(CoreError::Dimension(format!(
            "scene generation is two-dimensional, got {} axes",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d < 16) {
        return Err(CoreError::InvalidArgument(format!(
            "extents {dims:?} too small for the scene, need at least 16"
        )));
    }
    let (h, w) = (dims[0], dims[1]);
    let mut data = vec![0.0f32; h * w];
    let mut labels = vec![0u16; h * w];
    for row in 0..h {
        for col in 0..w {
            // Normalized coordinates in [0, 1].
            let y = row as f64 / (h - 1) as f64;
            let x = col as f64 / (w - 1) as f64;
            let tex = (2.0 * std::f64::consts::PI * x * 4.0).sin()
                * (2.0 * std::f64::consts::PI * y * 4.0).sin();
            let mut v = 0.2 + 0.05 * tex;
            let mut lab = 0u16;

            // Large ellipse with a bright dome.
            let e1 = sq((x - 0.31) / 0.20) + sq((y - 0.375) / 0.14);
            // Second ellipse with a linear shade along x.
            let e2 = sq((x - 0.70) / 0.156) + sq((y - 0.6875) / 0.1875);
            // Small disc fading from its center.
            let e3 = sq((x - 0.266) / 0.10) + sq((y - 0.734) / 0.10);

            if e1 <= 1.0 {
                v = 0.45 + 0.30 * (1.0 - e1);
                lab = 1;
            } else if e2 <= 1.0 {
                v = 0.50 + 0.40 * ((x - 0.544) / 0.312);
                lab = 2;
            } else if e3 <= 1.0 {
                v = 0.90 - 0.35 * e3.sqrt();
                lab = 3;
            }
            data[row * w + col] = v.clamp(0.05, 0.95) as f32;
            labels[row * w + col] = lab;
        }
    }
    Ok((
        Image::new(dims.to_vec(), spacing.to_vec(), data)?,
        LabelMap::new(dims.to_vec(), spacing.to_vec(), labels)?,
    ))
}

fn sq(v: f64) -> f64 {
    v * v
}

/// Apply an intensity remap voxelwise.
pub fn remap_image(img: &Image, remap: Remap) -> Image {
    let data = img
        .data
        .iter()
        .map(|&v| remap.apply(v as f64) as f32)
        .collect();
    Image::new(img.dims.clone(), img.spacing.clone(), data).expect("remap keeps values finite")
}

/// Generate one deformed pair. The same seed always produces the same pair;
/// different seeds differ in both deformation and noise.
pub fn generate_pair(cfg: &PhantomConfig, seed: u64) -> Result<PhantomPair> {
    if cfg.noise_sigma < 0.0 || !cfg.noise_sigma.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "noise level {} must be finite and non-negative",
            cfg.noise_sigma
        )));
    }
    let (fixed, fixed_labels) = base_pattern(&cfg.dims, &cfg.spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing_mm = vec![cfg.ffd_spacing_mm; cfg.dims.len()];
    let grid = sample_random_ffd(
        &cfg.dims,
        &cfg.spacing,
        &spacing_mm,
        cfg.ffd_sigma_mm,
        &mut rng,
    )?;
    let truth = ffd_to_dvf(&grid, &cfg.dims, &cfg.spacing)?;

    // Remap first, then resample: interpolation must mix intensities of the
    // target protocol, not mix first and remap the blend.
    let source = remap_image(&fixed, cfg.remap);
    let mut moving = warp_image(&source, &truth)?;
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).unwrap();
        for v in &mut moving.data {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    let moving_labels = warp_labels(&fixed_labels, &truth)?;

    Ok(PhantomPair {
        fixed,
        fixed_labels,
        moving,
        moving_labels,
        truth,
    })
}

/// A pair whose truth field is identically zero: the moving image is the
/// remapped, noisy scene in perfect correspondence. Translation sweeps of
/// similarity measures should peak at zero displacement on such a pair.
pub fn generate_aligned_pair(cfg: &PhantomConfig, seed: u64) -> Result<PhantomPair> {
    let aligned = PhantomConfig {
        ffd_sigma_mm: 0.0,
        ..cfg.clone()
    };
    generate_pair(&aligned, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mean_foreground_dice;
    use crate::transform::invert_field;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scene_has_three_labeled_regions() {
        let (img, labels) = base_pattern(&[64, 64], &[1.0, 1.0]).unwrap();
        let classes = labels.foreground_classes();
        assert_eq!(classes, vec![1, 2, 3]);
        for c in classes {
            let count = labels.data.iter().filter(|&&v| v == c).count();
            assert!(count > 50, "class {c} covers only {count} voxels");
        }
        assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scene_is_deterministic_and_scales() {
        let (a, _) = base_pattern(&[64, 64], &[1.0, 1.0]).unwrap();
        let (b, _) = base_pattern(&[64, 64], &[1.0, 1.0]).unwrap();
        assert_eq!(a.data, b.data);
        let (c, cl) = base_pattern(&[32, 48], &[1.0, 1.0]).unwrap();
        assert_eq!(c.dims, vec![32, 48]);
        assert!(cl.foreground_classes().len() >= 3);
        assert!(base_pattern(&[8, 64], &[1.0, 1.0]).is_err());
        assert!(base_pattern(&[4, 4, 4], &[1.0; 3]).is_err());
    }

    #[test]
    fn fold_remap_is_nonmonotone_and_exact() {
        let r = Remap::InvertingFold;
        assert_abs_diff_eq!(r.apply(0.0), 1.0);
        assert_abs_diff_eq!(r.apply(0.25), 0.5);
        assert_abs_diff_eq!(r.apply(0.5), 0.0);
        assert_abs_diff_eq!(r.apply(0.75), 0.5);
        assert_abs_diff_eq!(r.apply(1.0), 1.0);
        // Non-monotone: 0.25 and 0.75 collide.
        assert_abs_diff_eq!(r.apply(0.25), r.apply(0.75));
        assert_abs_diff_eq!(Remap::Identity.apply(0.3), 0.3);
    }

    #[test]
    fn pairs_are_seed_deterministic() {
        let cfg = PhantomConfig::default();
        let a = generate_pair(&cfg, 3).unwrap();
        let b = generate_pair(&cfg, 3).unwrap();
        let c = generate_pair(&cfg, 4).unwrap();
        assert_eq!(a.moving.data, b.moving.data);
        assert_eq!(a.truth.vectors, b.truth.vectors);
        assert_ne!(a.truth.vectors, c.truth.vectors);
        assert_ne!(a.moving.data, c.moving.data);
    }

    #[test]
    fn deformation_misaligns_and_its_inverse_restores() {
        let cfg = PhantomConfig::default();
        let pair = generate_pair(&cfg, 7).unwrap();
        let before = mean_foreground_dice(&pair.moving_labels, &pair.fixed_labels).unwrap();
        assert!(
            before < 0.95,
            "deformation too weak to measure: dice {before}"
        );
        let inv = invert_field(&pair.truth, 30).unwrap();
        let restored = warp_labels(&pair.moving_labels, &inv).unwrap();
        let after = mean_foreground_dice(&restored, &pair.fixed_labels).unwrap();
        assert!(
            after > before + 0.05,
            "inverse of the truth should realign: {before} -> {after}"
        );
    }

    #[test]
    fn noise_level_matches_configuration() {
        let cfg = PhantomConfig {
            remap: Remap::Identity,
            ..Default::default()
        };
        let clean_cfg = PhantomConfig {
            noise_sigma: 0.0,
            ..cfg.clone()
        };
        let noisy = generate_pair(&cfg, 11).unwrap();
        let clean = generate_pair(&clean_cfg, 11).unwrap();
        let diffs: Vec<f64> = noisy
            .moving
            .data
            .iter()
            .zip(&clean.moving.data)
            .map(|(&a, &b)| (a - b) as f64)
            .collect();
        let std = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!(
            (0.01..0.03).contains(&std),
            "noise std {std} far from configured 0.02"
        );
    }

    #[test]
    fn aligned_pair_has_zero_truth() {
        let cfg = PhantomConfig {
            remap: Remap::InvertingFold,
            ..Default::default()
        };
        let pair = generate_aligned_pair(&cfg, 5).unwrap();
        assert!(pair.truth.vectors.iter().all(|&v| v == 0.0));
        assert_eq!(
            mean_foreground_dice(&pair.moving_labels, &pair.fixed_labels).unwrap(),
            1.0
        );
        // Intensities follow the fold: bright where the scene was dark.
        let folded = remap_image(&pair.fixed, Remap::InvertingFold);
        let err: f64 = pair
            .moving
            .data
            .iter()
            .zip(&folded.data)
            .map(|(&a, &b)| (a - b).abs() as f64)
            .sum::<f64>()
            / folded.data.len() as f64;
        assert!(err < 0.05, "aligned moving image deviates by {err}");
    }
}
