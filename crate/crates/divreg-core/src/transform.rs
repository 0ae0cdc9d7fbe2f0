//! Dense displacement fields, cubic B-spline lattices, and warping.
//!
//! Displacements are stored in voxel units, component-major
//! (`vectors[axis * voxels + p]`), slowest-first like image dims. Millimeters
//! appear only where geometry demands them: B-spline lattices are specified
//! in mm and converted here, and distance metrics consume spacing directly.
//!
//! Warp convention: `out(x) = in(x + d(x))` (pull), multilinear interpolation
//! with clamp-to-edge. `compose` follows the same convention, see its doc.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::kernels;
use crate::autodiff::tensor::{strides_of, Scalar, Tensor};
use crate::error::{CoreError, Result};
use crate::image::{read_mha, write_mha, ElemType, Image, LabelMap};

/// Comment line written into displacement-field files so the convention
/// travels with the data.
pub const FIELD_CONVENTION: &str =
    "displacement in voxel units, component order matches DimSize reversed; out(x) = in(x + d(x))";

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    /// Component-major displacement data, `rank * voxels` values.
    pub vectors: Vec<f32>,
}

impl DisplacementField {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, vectors: Vec<f32>) -> Result<Self> {
        let rank = dims.len();
        if !(2..=3).contains(&rank) {
            return Err(CoreError::Dimension(format!(
                "field rank {rank} unsupported"
            )));
        }
        if spacing.len() != rank {
            return Err(CoreError::InvalidArgument("spacing rank mismatch".into()));
        }
        let vox: usize = dims.iter().product();
        if vectors.len() != rank * vox {
            return Err(CoreError::ShapeMismatch(format!(
                "expected {} displacement values, got {}",
                rank * vox,
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidArgument(
                "field contains non-finite displacements".into(),
            ));
        }
        Ok(Self {
            dims,
            spacing,
            vectors,
        })
    }

    pub fn identity(dims: Vec<usize>, spacing: Vec<f64>) -> Result<Self> {
        let vox: usize = dims.iter().product();
        let rank = dims.len();
        Self::new(dims, spacing, vec![0.0; rank * vox])
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// `[1, rank, dims...]` tensor of the displacements.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut shape = vec![1, self.rank()];
        shape.extend_from_slice(&self.dims);
        Tensor::new(
            shape,
            self.vectors
                .iter()
                .map(|&v| T::from_f64(v as f64))
                .collect(),
        )
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, spacing: Vec<f64>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 3 || s[0] != 1 || s[1] != s.len() - 2 {
            return Err(CoreError::ShapeMismatch(format!(
                "expected [1, rank, spatial...] tensor, got {s:?}"
            )));
        }
        Self::new(
            s[2..].to_vec(),
            spacing,
            t.data().iter().map(|&v| v.as_f64() as f32).collect(),
        )
    }

    /// Mean absolute displacement over all components and voxels, in voxels.
    pub fn mean_abs(&self) -> f64 {
        if self.vectors.is_empty() {
            return 0.0;
        }
        self.vectors.iter().map(|&v| (v as f64).abs()).sum::<f64>() / self.vectors.len() as f64
    }
}

fn check_same_grid(a_dims: &[usize], b_dims: &[usize]) -> Result<()> {
    if a_dims != b_dims {
        return Err(CoreError::ShapeMismatch(format!(
            "grids {a_dims:?} and {b_dims:?} differ"
        )));
    }
    Ok(())
}

/// Pull-warp an intensity image: `out(x) = img(x + d(x))`, computed in f64.
pub fn warp_image(img: &Image, field: &DisplacementField) -> Result<Image> {
    check_same_grid(&img.dims, &field.dims)?;
    let it = img.to_tensor::<f64>();
    let ft = field.to_tensor::<f64>();
    let out = kernels::warp_forward(&it, &ft);
    Image::from_tensor(&out, img.spacing.clone())
}

/// Nearest-neighbor pull-warp for label maps: each output voxel takes the
/// label at the rounded source position, clamped to the image. Never invents
/// classes absent from the input.
pub fn warp_labels(labels: &LabelMap, field: &DisplacementField) -> Result<LabelMap> {
    check_same_grid(&labels.dims, &field.dims)?;
    let vox: usize = labels.dims.iter().product();
    let strides = strides_of(&labels.dims);
    let mut out = vec![0u16; vox];
    for (p, o) in out.iter_mut().enumerate() {
        let mut src = 0usize;
        for (a, &stride) in strides.iter().enumerate() {
            let coord = (p / stride) % labels.dims[a];
            let s = coord as f64 + field.vectors[a * vox + p] as f64;
            let idx = (s.round().max(0.0) as usize).min(labels.dims[a] - 1);
            src += idx * stride;
        }
        *o = labels.data[src];
    }
    LabelMap::new(labels.dims.clone(), labels.spacing.clone(), out)
}

/// Displacement field equivalent to warping by `a` first, then by `b`:
/// `warp(warp(img, a), b) == warp(img, compose(a, b))` up to interpolation.
/// Pointwise `compose(a, b)(x) = b(x) + a(x + b(x))`, with `a` sampled
/// multilinearly (clamp-to-edge).
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> Result<DisplacementField> {
    check_same_grid(&a.dims, &b.dims)?;
    let at = a.to_tensor::<f64>();
    let bt = b.to_tensor::<f64>();
    // sampling a at x + b(x) is exactly a pull-warp of a's component planes
    let sampled = kernels::warp_forward(&at, &bt);
    let data: Vec<f32> = sampled
        .data()
        .iter()
        .zip(bt.data())
        .map(|(&av, &bv)| (av + bv) as f32)
        .collect();
    DisplacementField::new(a.dims.clone(), a.spacing.clone(), data)
}

/// Approximate inverse displacement by fixed-point iteration:
/// `inv_{k+1}(x) = -d(x + inv_k(x))`. Converges for moderate deformations.
pub fn invert_field(field: &DisplacementField, iterations: usize) -> Result<DisplacementField> {
    let ft = field.to_tensor::<f64>();
    let mut inv = Tensor::zeros(ft.shape());
    for _ in 0..iterations {
        let sampled = kernels::warp_forward(&ft, &inv);
        inv = sampled.map(|v| -v);
    }
    DisplacementField::new(
        field.dims.clone(),
        field.spacing.clone(),
        inv.data().iter().map(|&v| v as f32).collect(),
    )
}

/// Cubic B-spline lattice of control-point displacements in millimeters.
/// Control index `j` along an axis sits at `(j - 1) * spacing_mm`, so the
/// lattice overhangs the image by one cell on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct FfdGrid {
    /// Control cell size per axis, mm.
    pub spacing_mm: Vec<f64>,
    /// Control points per axis.
    pub control_dims: Vec<usize>,
    /// Component-major control displacements in mm, `rank * control voxels`.
    pub control_disp: Vec<f64>,
}

impl FfdGrid {
    /// Lattice covering `dims` voxels at the given image spacing.
    pub fn covering(dims: &[usize], img_spacing: &[f64], spacing_mm: &[f64]) -> Result<Self> {
        let rank = dims.len();
        if img_spacing.len() != rank || spacing_mm.len() != rank {
            return Err(CoreError::InvalidArgument(
                "spacing rank mismatch for lattice".into(),
            ));
        }
        if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(CoreError::InvalidArgument(
                "control spacing must be positive".into(),
            ));
        }
        let control_dims: Vec<usize> = (0..rank)
            .map(|a| kernels::ffd_control_dim(dims[a], spacing_mm[a] / img_spacing[a]))
            .collect();
        let n: usize = control_dims.iter().product();
        Ok(Self {
            spacing_mm: spacing_mm.to_vec(),
            control_dims,
            control_disp: vec![0.0; rank * n],
        })
    }

    pub fn rank(&self) -> usize {
        self.control_dims.len()
    }
}

/// Draw i.i.d. Gaussian control displacements (`sigma_mm` each component).
pub fn sample_random_ffd(
    dims: &[usize],
    img_spacing: &[f64],
    spacing_mm: &[f64],
    sigma_mm: f64,
    rng: &mut impl Rng,
) -> Result<FfdGrid> {
    if !(sigma_mm.is_finite() && sigma_mm >= 0.0) {
        return Err(CoreError::InvalidArgument(
            "sigma_mm must be non-negative".into(),
        ));
    }
    let mut grid = FfdGrid::covering(dims, img_spacing, spacing_mm)?;
    let normal = Normal::new(0.0f64, sigma_mm.max(f64::MIN_POSITIVE)).unwrap();
    if sigma_mm > 0.0 {
        for v in &mut grid.control_disp {
            *v = normal.sample(rng);
        }
    }
    Ok(grid)
}

/// Evaluate the lattice into a dense field on a voxel grid. Control values in
/// mm convert to voxel units through the image spacing; the dense map is
/// linear in the control displacements.
pub fn ffd_to_dvf(
    grid: &FfdGrid,
    dims: &[usize],
    img_spacing: &[f64],
) -> Result<DisplacementField> {
    let rank = grid.rank();
    if dims.len() != rank || img_spacing.len() != rank {
        return Err(CoreError::Dimension(
            "lattice rank does not match target grid".into(),
        ));
    }
    let spacing_vox: Vec<f64> = (0..rank)
        .map(|a| grid.spacing_mm[a] / img_spacing[a])
        .collect();
    for a in 0..rank {
        let need = kernels::ffd_control_dim(dims[a], spacing_vox[a]);
        if grid.control_dims[a] < need {
            return Err(CoreError::ShapeMismatch(format!(
                "lattice axis {a} has {} control points, needs {need}",
                grid.control_dims[a]
            )));
        }
    }
    // convert mm control displacements to voxel units per component
    let gvox: usize = grid.control_dims.iter().product();
    let mut shape = vec![rank];
    shape.extend_from_slice(&grid.control_dims);
    let control_vox = Tensor::<f64>::from_fn(&shape, |i| {
        let comp = i / gvox;
        grid.control_disp[i] / img_spacing[comp]
    });
    let dense = kernels::ffd_interp_forward(&control_vox, dims, &spacing_vox);
    DisplacementField::new(
        dims.to_vec(),
        img_spacing.to_vec(),
        dense.data().iter().map(|&v| v as f32).collect(),
    )
}

/// Forward-difference smoothness of a field tensor `[n, rank, spatial...]`:
/// the per-(component, axis) means of squared differences, summed. Zero iff
/// the field is constant. A unit shear (one component growing by one voxel
/// per voxel along one axis) scores exactly one.
pub fn smoothness_value<'t, T: Scalar>(field: crate::autodiff::Value<'t, T>) -> crate::autodiff::Value<'t, T> {
    let shape = field.shape();
    let rank = shape[1];
    let mut total: Option<crate::autodiff::Value<'t, T>> = None;
    for a in 0..shape.len() - 2 {
        let axis = 2 + a;
        let d = shape[axis];
        if d < 2 {
            continue;
        }
        let hi = field.slice_axis(axis, 1, d - 1);
        let lo = field.slice_axis(axis, 0, d - 1);
        let diff = hi.sub(lo);
        let term = diff
            .mul(diff)
            .reduce_mean()
            .scale(T::from_f64(rank as f64));
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    total.expect("smoothness on a field with no differentiable axis")
}

/// Non-differentiating convenience over a stored field.
pub fn smoothness_penalty(field: &DisplacementField) -> f64 {
    let tape = crate::autodiff::Tape::<f64>::new();
    let v = tape.input(field.to_tensor::<f64>());
    smoothness_value(v).item()
}

pub fn save_field(field: &DisplacementField, path: &Path) -> Result<()> {
    let rank = field.rank();
    let vox = field.voxels();
    // interleave components per voxel as the format expects
    let mut payload = Vec::with_capacity(field.vectors.len() * 4);
    for p in 0..vox {
        for a in 0..rank {
            payload.extend_from_slice(&field.vectors[a * vox + p].to_le_bytes());
        }
    }
    write_mha(
        path,
        &field.dims,
        &field.spacing,
        rank,
        ElemType::Float,
        Some(FIELD_CONVENTION),
        &payload,
    )
}

pub fn load_field(path: &Path) -> Result<DisplacementField> {
    let f = read_mha(path)?;
    // A field stamped with a different convention must not be
    // reinterpreted silently; files without a comment are accepted as-is.
    if let Some(c) = &f.comment {
        if c != FIELD_CONVENTION {
            return Err(CoreError::Parse {
                path: path.display().to_string(),
                msg: format!("unrecognized displacement convention: {c}"),
            });
        }
    }
    let rank = f.dims.len();
    if f.elem != ElemType::Float || f.channels != rank {
        return Err(CoreError::Parse {
            path: path.display().to_string(),
            msg: format!(
                "expected MET_FLOAT with {} channels, found {} channels",
                rank, f.channels
            ),
        });
    }
    let vox: usize = f.dims.iter().product();
    let mut vectors = vec![0.0f32; rank * vox];
    for p in 0..vox {
        for a in 0..rank {
            let off = (p * rank + a) * 4;
            vectors[a * vox + p] =
                f32::from_le_bytes(f.payload[off..off + 4].try_into().unwrap());
        }
    }
    DisplacementField::new(f.dims, f.spacing, vectors)
}
