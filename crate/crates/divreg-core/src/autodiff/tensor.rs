//! Dense row-major tensors over a float scalar type.
//!
//! Shape conventions used throughout the crate:
//! * scalars have shape `[]` (one element),
//! * batched feature maps are `[batch, channels, spatial...]` with the last
//!   axis fastest-varying.

use std::fmt;

use num_traits::Float;

/// Float scalar the differentiation kernel is generic over.
///
/// `f64` is used for oracle checks and gradient verification, `f32` for
/// training-scale work.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;
    /// Cap on `exp` arguments keeping the result finite.
    const EXP_CLAMP: f64;
    /// Smallest argument `log` accepts; smaller inputs are clamped.
    const LOG_FLOOR: f64;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    const EXP_CLAMP: f64 = 80.0;
    const LOG_FLOOR: f64 = f32::MIN_POSITIVE as f64;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    const EXP_CLAMP: f64 = 700.0;
    const LOG_FLOOR: f64 = f64::MIN_POSITIVE;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// `data.len()` must equal the product of `shape` (empty shape = scalar).
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expect,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Row-major strides (last axis stride 1).
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            self.len(),
            expect,
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() <= 8 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{} .. {}]",
                self.shape,
                self.data[0],
                self.data[self.len() - 1]
            )
        }
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Advance a row-major index vector; returns false after the last index.
pub fn next_index(idx: &mut [usize], dims: &[usize]) -> bool {
    for ax in (0..dims.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < dims[ax] {
            return true;
        }
        idx[ax] = 0;
    }
    false
}
