//! Scalar images, integer label maps, and MetaImage (.mha/.mhd) I/O.
//!
//! Dims are stored slowest-first (`[h, w]` in 2D, `[d, h, w]` in 3D) with the
//! last axis fastest-varying, matching the tensor layout. MetaImage headers
//! list `DimSize`/`ElementSpacing` fastest-first, so both are reversed at the
//! file boundary. Payloads are little-endian; multi-channel data is
//! interleaved per voxel as MetaImage expects.

use std::fs;
use std::path::Path;

use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{CoreError, Result};

/// Scalar intensity image. Voxel values are `f32`; geometry (`spacing`, mm
/// per voxel) tags along for distance-aware metrics and file round-trips.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub data: Vec<f32>,
}

/// Integer class labels on the same grid layout as `Image`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub data: Vec<u16>,
}

fn check_geometry(dims: &[usize], spacing: &[f64], len: usize) -> Result<()> {
    if dims.len() < 2 || dims.len() > 3 {
        return Err(CoreError::Dimension(format!(
            "rank {} unsupported, expected 2 or 3",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(CoreError::InvalidArgument(format!("empty dims {dims:?}")));
    }
    if spacing.len() != dims.len() || spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(CoreError::InvalidArgument(format!(
            "spacing {spacing:?} invalid for dims {dims:?}"
        )));
    }
    let expect: usize = dims.iter().product();
    if len != expect {
        return Err(CoreError::ShapeMismatch(format!(
            "data length {len} does not match dims {dims:?}"
        )));
    }
    Ok(())
}

impl Image {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, data: Vec<f32>) -> Result<Self> {
        check_geometry(&dims, &spacing, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidArgument(
                "image contains non-finite intensities".into(),
            ));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Vec<usize>, spacing: Vec<f64>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![0.0; n])
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn voxels(&self) -> usize {
        self.data.len()
    }

    /// `[1, 1, dims...]` tensor of the intensities.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut shape = vec![1, 1];
        shape.extend_from_slice(&self.dims);
        Tensor::new(
            shape,
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }

    /// Rebuild from a `[1, 1, dims...]` tensor (values cast to f32).
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, spacing: Vec<f64>) -> Result<Self> {
        let s = t.shape();
        if s.len() < 3 || s[0] != 1 || s[1] != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "expected [1, 1, spatial...] tensor, got {s:?}"
            )));
        }
        Self::new(
            s[2..].to_vec(),
            spacing,
            t.data().iter().map(|&v| v.as_f64() as f32).collect(),
        )
    }
}

impl LabelMap {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, data: Vec<u16>) -> Result<Self> {
        check_geometry(&dims, &spacing, data.len())?;
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Sorted distinct class ids present in the map.
    pub fn classes(&self) -> Vec<u16> {
        let mut c: Vec<u16> = self.data.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Sorted distinct non-zero class ids (zero is background).
    pub fn foreground_classes(&self) -> Vec<u16> {
        self.classes().into_iter().filter(|&c| c != 0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    MinMax,
    ZScore,
}

/// Rescale intensities: `MinMax` to `[0, 1]`, `ZScore` to zero mean and unit
/// population standard deviation. A constant image cannot be normalized.
pub fn normalize_intensity(img: &Image, method: Normalize) -> Result<Image> {
    let lo = img.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi <= lo {
        return Err(CoreError::DegenerateInput(
            "constant image has no intensity range".into(),
        ));
    }
    let data = match method {
        Normalize::MinMax => {
            let inv = 1.0 / (hi - lo);
            img.data.iter().map(|&v| (v - lo) * inv).collect()
        }
        Normalize::ZScore => {
            let n = img.data.len() as f64;
            let mean = img.data.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = img
                .data
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            let inv = 1.0 / var.sqrt();
            img.data
                .iter()
                .map(|&v| ((v as f64 - mean) * inv) as f32)
                .collect()
        }
    };
    Ok(Image {
        dims: img.dims.clone(),
        spacing: img.spacing.clone(),
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ElemType {
    Float,
    Short,
}

impl ElemType {
    fn name(self) -> &'static str {
        match self {
            ElemType::Float => "MET_FLOAT",
            ElemType::Short => "MET_SHORT",
        }
    }

    fn size(self) -> usize {
        match self {
            ElemType::Float => 4,
            ElemType::Short => 2,
        }
    }
}

pub(crate) struct MhaFile {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub channels: usize,
    pub elem: ElemType,
    pub comment: Option<String>,
    pub payload: Vec<u8>,
}

/// Serialize a MetaImage with a LOCAL payload. `dims`/`spacing` are given
/// slowest-first and written fastest-first as the format requires.
pub(crate) fn write_mha(
    path: &Path,
    dims: &[usize],
    spacing: &[f64],
    channels: usize,
    elem: ElemType,
    comment: Option<&str>,
    payload: &[u8],
) -> Result<()> {
    let rev = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(" ");
    let dim_size = rev(&mut dims.iter().rev().map(|d| d.to_string()));
    let spacing_str = rev(&mut spacing.iter().rev().map(|s| s.to_string()));

    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str(&format!("NDims = {}\n", dims.len()));
    header.push_str("BinaryData = True\n");
    header.push_str("BinaryDataByteOrderMSB = False\n");
    header.push_str("CompressedData = False\n");
    if let Some(c) = comment {
        header.push_str(&format!("Comment = {c}\n"));
    }
    header.push_str(&format!("DimSize = {dim_size}\n"));
    header.push_str(&format!("ElementSpacing = {spacing_str}\n"));
    if channels > 1 {
        header.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    header.push_str(&format!("ElementType = {}\n", elem.name()));
    header.push_str("ElementDataFile = LOCAL\n");

    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_mha(path: &Path) -> Result<MhaFile> {
    let bytes = fs::read(path)?;
    let fail = |msg: String| CoreError::Parse {
        path: path.display().to_string(),
        msg,
    };

    let mut ndims: Option<usize> = None;
    let mut dim_size: Option<Vec<usize>> = None;
    let mut spacing: Option<Vec<f64>> = None;
    let mut channels = 1usize;
    let mut elem: Option<ElemType> = None;
    let mut comment: Option<String> = None;
    let mut data_file: Option<String> = None;

    let mut pos = 0usize;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| pos + e)
            .ok_or_else(|| fail("header has no ElementDataFile line".into()))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| fail("non-ASCII header line".into()))?
            .trim_end_matches('\r');
        pos = end + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(fail(format!("malformed header line '{line}'")));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "NDims" => {
                ndims = Some(
                    value
                        .parse()
                        .map_err(|_| fail(format!("bad NDims '{value}'")))?,
                )
            }
            "DimSize" => {
                let v: std::result::Result<Vec<usize>, _> =
                    value.split_whitespace().map(str::parse).collect();
                dim_size = Some(v.map_err(|_| fail(format!("bad DimSize '{value}'")))?);
            }
            "ElementSpacing" => {
                let v: std::result::Result<Vec<f64>, _> =
                    value.split_whitespace().map(str::parse).collect();
                spacing = Some(v.map_err(|_| fail(format!("bad ElementSpacing '{value}'")))?);
            }
            "ElementNumberOfChannels" => {
                channels = value
                    .parse()
                    .map_err(|_| fail(format!("bad ElementNumberOfChannels '{value}'")))?;
            }
            "ElementType" => {
                elem = Some(match value {
                    "MET_FLOAT" => ElemType::Float,
                    "MET_SHORT" => ElemType::Short,
                    other => return Err(fail(format!("unsupported ElementType '{other}'"))),
                });
            }
            "BinaryData" => {
                if !value.eq_ignore_ascii_case("true") {
                    return Err(fail("only binary data is supported".into()));
                }
            }
            "BinaryDataByteOrderMSB" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(fail("big-endian payloads are not supported".into()));
                }
            }
            "CompressedData" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(fail("compressed payloads are not supported".into()));
                }
            }
            "Comment" => comment = Some(value.to_string()),
            "ElementDataFile" => {
                data_file = Some(value.to_string());
                break;
            }
            _ => {}
        }
    }

    let data_file = data_file.ok_or_else(|| fail("missing ElementDataFile".into()))?;
    let ndims = ndims.ok_or_else(|| fail("missing NDims".into()))?;
    let mut dims = dim_size.ok_or_else(|| fail("missing DimSize".into()))?;
    let elem = elem.ok_or_else(|| fail("missing ElementType".into()))?;
    let mut spacing = spacing.unwrap_or_else(|| vec![1.0; ndims]);
    if dims.len() != ndims || spacing.len() != ndims {
        return Err(fail(format!(
            "NDims {} disagrees with DimSize/ElementSpacing lengths",
            ndims
        )));
    }
    // file order is fastest-first; flip to the internal slowest-first layout
    dims.reverse();
    spacing.reverse();

    let payload = if data_file == "LOCAL" {
        bytes[pos..].to_vec()
    } else {
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        fs::read(dir.join(&data_file))?
    };
    let expect: usize = dims.iter().product::<usize>() * channels * elem.size();
    if payload.len() != expect {
        return Err(fail(format!(
            "payload is {} bytes, expected {expect}",
            payload.len()
        )));
    }
    Ok(MhaFile {
        dims,
        spacing,
        channels,
        elem,
        comment,
        payload,
    })
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(img.data.len() * 4);
    for &v in &img.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_mha(
        path,
        &img.dims,
        &img.spacing,
        1,
        ElemType::Float,
        None,
        &payload,
    )
}

pub fn load_image(path: &Path) -> Result<Image> {
    let f = read_mha(path)?;
    if f.elem != ElemType::Float || f.channels != 1 {
        return Err(CoreError::Parse {
            path: path.display().to_string(),
            msg: "expected single-channel MET_FLOAT image".into(),
        });
    }
    let data: Vec<f32> = f
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(f.dims, f.spacing, data)
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(labels.data.len() * 2);
    for &v in &labels.data {
        payload.extend_from_slice(&(v as i16).to_le_bytes());
    }
    write_mha(
        path,
        &labels.dims,
        &labels.spacing,
        1,
        ElemType::Short,
        None,
        &payload,
    )
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let f = read_mha(path)?;
    if f.elem != ElemType::Short || f.channels != 1 {
        return Err(CoreError::Parse {
            path: path.display().to_string(),
            msg: "expected single-channel MET_SHORT label map".into(),
        });
    }
    let mut data = Vec::with_capacity(f.payload.len() / 2);
    for c in f.payload.chunks_exact(2) {
        let v = i16::from_le_bytes(c.try_into().unwrap());
        if v < 0 {
            return Err(CoreError::Parse {
                path: path.display().to_string(),
                msg: format!("negative label {v}"),
            });
        }
        data.push(v as u16);
    }
    LabelMap::new(f.dims, f.spacing, data)
}
