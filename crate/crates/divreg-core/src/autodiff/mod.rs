//! Reverse-mode differentiation kernel: tensors, the tape, spatial kernels,
//! finite-difference verification, and the tensor store used by checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_tensors, peek_checkpoint, save_tensors, LoadedCheckpoint};
pub use gradcheck::{grad_check, grad_check_multi, rel_err, resample_until};
pub use tape::{Gradients, Tape, Value};
pub use tensor::{next_index, strides_of, Scalar, Tensor};
