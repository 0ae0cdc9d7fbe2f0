//! Deformable image registration built around a trainable divergence-based
//! similarity estimator, with classic intensity metrics as baselines.
//!
//! The crate is organized as:
//! * [`autodiff`]: tape-based reverse-mode differentiation and its kernels,
//! * [`image`]: scalar images, label maps, MetaImage I/O,
//! * [`transform`]: dense displacement fields, B-spline lattices, warping,
//! * [`similarity`]: SSD, LNCC, histogram and Parzen mutual information, and
//!   exact discrete-distribution references,
//! * [`kldivnet`]: the trainable divergence estimator and its bound,
//! * [`regnet`]: the registration network producing displacement fields,
//! * [`train`]: optimizers and the joint training loop,
//! * [`metrics`]: overlap and surface-distance measures,
//! * [`landscape`]: similarity-vs-offset sweeps,
//! * [`phantom`]: synthetic pair generation with known ground truth.

pub mod autodiff;
pub mod error;
pub mod image;
pub mod kldivnet;
pub mod landscape;
pub mod metrics;
pub mod phantom;
pub mod regnet;
pub mod similarity;
pub mod train;
pub mod transform;

pub use autodiff::{Scalar, Tape, Tensor, Value};
pub use error::{CoreError, Result};
pub use image::{Image, LabelMap};
pub use transform::DisplacementField;
