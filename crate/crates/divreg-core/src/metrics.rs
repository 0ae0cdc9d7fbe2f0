//! Overlap and surface-distance metrics between label maps.
//!
//! Distances are physical (millimeters, voxel index times spacing) and
//! computed exactly over all surface-point pairs; the maps evaluated here
//! are small enough that quadratic cost is irrelevant next to exactness.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::LabelMap;

fn check_compatible(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims != b.dims {
        return Err(CoreError::ShapeMismatch(format!(
            "label maps {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    if a.spacing != b.spacing {
        return Err(CoreError::ShapeMismatch(format!(
            "spacings {:?} vs {:?}",
            a.spacing, b.spacing
        )));
    }
    Ok(())
}

/// Dice overlap of one class: `2 |A and B| / (|A| + |B|)`.
/// When the class is absent from both maps the overlap is perfect by
/// convention and the result is 1.
pub fn dice_coefficient(a: &LabelMap, b: &LabelMap, class: u16) -> Result<f64> {
    check_compatible(a, b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&va, &vb) in a.data.iter().zip(&b.data) {
        let ia = va == class;
        let ib = vb == class;
        inter += (ia && ib) as usize;
        total += ia as usize + ib as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Mean Dice over the union of nonzero classes present in either map.
pub fn mean_foreground_dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    check_compatible(a, b)?;
    let mut classes: Vec<u16> = a
        .foreground_classes()
        .into_iter()
        .chain(b.foreground_classes())
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(CoreError::DegenerateInput(
            "no foreground classes in either map".into(),
        ));
    }
    let mut sum = 0.0;
    for &c in &classes {
        sum += dice_coefficient(a, b, c)?;
    }
    Ok(sum / classes.len() as f64)
}

/// Physical coordinates (mm) of the voxels of `class` that touch a face
/// neighbor outside the class. The image border counts as outside, so a
/// region flush against the edge still has a surface there.
fn surface_points(map: &LabelMap, class: u16) -> Vec<Vec<f64>> {
    let dims = &map.dims;
    let rank = dims.len();
    let strides = crate::autodiff::strides_of(dims);
    let mut pts = Vec::new();
    let mut idx = vec![0usize; rank];
    for (flat, &v) in map.data.iter().enumerate() {
        if v == class {
            let mut boundary = false;
            'axes: for ax in 0..rank {
                for dir in [-1isize, 1] {
                    let n = idx[ax] as isize + dir;
                    if n < 0 || n as usize >= dims[ax] {
                        boundary = true;
                        break 'axes;
                    }
                    let nf = (flat as isize + dir * strides[ax] as isize) as usize;
                    if map.data[nf] != class {
                        boundary = true;
                        break 'axes;
                    }
                }
            }
            if boundary {
                pts.push(
                    idx.iter()
                        .zip(&map.spacing)
                        .map(|(&i, &s)| i as f64 * s)
                        .collect(),
                );
            }
        }
        crate::autodiff::next_index(&mut idx, dims);
    }
    pts
}

fn euclid(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Distance from each point of `from` to its nearest point of `to`.
fn directed_distances(from: &[Vec<f64>], to: &[Vec<f64>]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| euclid(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Nearest-rank percentile of unsorted values, `p` in (0, 100].
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Surface distance summary between one class's boundaries, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    /// Mean of all directed nearest distances, both directions pooled.
    pub asd: f64,
    /// Largest nearest distance in either direction.
    pub hausdorff: f64,
    /// The larger of the two directed 95th percentiles.
    pub hausdorff95: f64,
}

/// Exact all-pairs surface distances for `class`. Errors when either map
/// lacks the class, since distances to an empty surface are undefined.
pub fn surface_distances(a: &LabelMap, b: &LabelMap, class: u16) -> Result<SurfaceDistances> {
    check_compatible(a, b)?;
    let sa = surface_points(a, class);
    let sb = surface_points(b, class);
    if sa.is_empty() || sb.is_empty() {
        return Err(CoreError::DegenerateInput(format!(
            "class {class} has no surface in one of the maps"
        )));
    }
    let ab = directed_distances(&sa, &sb);
    let ba = directed_distances(&sb, &sa);
    let sum: f64 = ab.iter().chain(&ba).sum();
    let max = ab.iter().chain(&ba).cloned().fold(0.0, f64::max);
    Ok(SurfaceDistances {
        asd: sum / (ab.len() + ba.len()) as f64,
        hausdorff: max,
        hausdorff95: percentile(&ab, 95.0).max(percentile(&ba, 95.0)),
    })
}

/// Everything measured for one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u16,
    pub dice: f64,
    /// Absent when the class is missing from one map.
    pub surface: Option<SurfaceDistances>,
}

/// Per-class metrics over the union of foreground classes in both maps.
pub fn evaluate_labels(a: &LabelMap, b: &LabelMap) -> Result<Vec<ClassMetrics>> {
    check_compatible(a, b)?;
    let mut classes: Vec<u16> = a
        .foreground_classes()
        .into_iter()
        .chain(b.foreground_classes())
        .collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|class| {
            Ok(ClassMetrics {
                class,
                dice: dice_coefficient(a, b, class)?,
                surface: surface_distances(a, b, class).ok(),
            })
        })
        .collect()
}
