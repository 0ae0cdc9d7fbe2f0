//! On-disk tensor store: a JSON manifest (names, shapes, dtype, free-form
//! metadata) followed by raw little-endian payloads in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"DVCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub struct LoadedCheckpoint<T> {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> LoadedCheckpoint<T> {
    pub fn find(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor '{name}'")))
    }

    /// Copy the stored tensor named `name` into `dst`; shapes must agree.
    pub fn restore(&self, name: &str, dst: &mut Tensor<T>) -> Result<()> {
        let src = self.find(name)?;
        if src.shape() != dst.shape() {
            return Err(CoreError::Checkpoint(format!(
                "tensor '{}' has shape {:?}, expected {:?}",
                name,
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
        Ok(())
    }
}

pub fn save_tensors<T: Scalar>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let manifest = Manifest {
        dtype: T::DTYPE.to_string(),
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mjson = serde_json::to_vec(&manifest)
        .map_err(|e| CoreError::Checkpoint(format!("manifest encode: {e}")))?;

    let payload: usize = tensors.iter().map(|(_, t)| t.len() * T::BYTES).sum();
    let mut out = Vec::with_capacity(4 + 4 + 8 + mjson.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&mjson);
    for (_, t) in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read only a checkpoint's dtype and metadata, without touching the
/// payload. Lets a caller decide which scalar type to load with.
pub fn peek_checkpoint(path: &Path) -> Result<(String, serde_json::Value)> {
    let bytes = fs::read(path)?;
    let fail = |msg: String| CoreError::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(fail("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| fail(format!("manifest decode: {e}")))?;
    Ok((manifest.dtype, manifest.meta))
}

pub fn load_tensors<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let bytes = fs::read(path)?;
    let fail = |msg: String| CoreError::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(fail("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| fail(format!("manifest decode: {e}")))?;
    if manifest.dtype != T::DTYPE {
        return Err(fail(format!(
            "dtype {} does not match requested {}",
            manifest.dtype,
            T::DTYPE
        )));
    }

    let mut offset = 16 + mlen;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let need = n * T::BYTES;
        if bytes.len() < offset + need {
            return Err(fail(format!("truncated payload for '{}'", entry.name)));
        }
        let data: Vec<T> = (0..n)
            .map(|i| T::read_le(&bytes[offset + i * T::BYTES..]))
            .collect();
        offset += need;
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)));
    }
    if offset != bytes.len() {
        return Err(fail("trailing bytes after payload".into()));
    }
    Ok(LoadedCheckpoint {
        meta: manifest.meta,
        tensors,
    })
}
