//! Weight initialization.
//!
//! Convolution and fully-connected weights draw from a fan-in-scaled normal
//! (std = sqrt(2 / fan_in)); batch-norm gamma is 1, beta 0; all biases 0.
//! Each parameter draws from its own name-derived stream, so identically
//! named parameters are identical across builds regardless of registration
//! order.

use crate::rng::streams;
use crate::tensor::{Scalar, Tensor};

pub fn fan_in_normal<T: Scalar>(
    seed: u64,
    name: &str,
    dims: Vec<usize>,
    fan_in: usize,
) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = streams::param_rng(seed, name);
    Tensor::from_fn(dims, || T::from_f64(rng.next_normal() * std))
}

pub fn conv_weight<T: Scalar>(
    seed: u64,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Tensor<T> {
    fan_in_normal(seed, name, vec![c_out, c_in, k, k], c_in * k * k)
}

/// Transposed-convolution weight, [C_in, C_out, k, k] layout.
pub fn conv_transpose_weight<T: Scalar>(
    seed: u64,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Tensor<T> {
    fan_in_normal(seed, name, vec![c_in, c_out, k, k], c_in * k * k)
}

pub fn linear_weight<T: Scalar>(seed: u64, name: &str, d_out: usize, d_in: usize) -> Tensor<T> {
    fan_in_normal(seed, name, vec![d_out, d_in], d_in)
}
