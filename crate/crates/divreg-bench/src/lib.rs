//! Shared fixtures for the kernel and pipeline benchmarks.

use divreg_core::phantom::{generate_pair, PhantomConfig, PhantomPair};
use divreg_core::{Scalar, Tensor};

/// A reproducible textured pair on a square grid.
pub fn pair(extent: usize, seed: u64) -> PhantomPair {
    let cfg = PhantomConfig {
        dims: vec![extent, extent],
        ..PhantomConfig::default()
    };
    generate_pair(&cfg, seed).expect("fixture generation")
}

/// Deterministic filler values in [-1, 1], cheap enough for large tensors.
pub fn filled<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        T::from_f64((state >> 11) as f64 / (1u64 << 52) as f64 - 1.0)
    })
}
