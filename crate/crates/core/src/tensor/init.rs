//! Parameter initializers.
//!
//! Weight matrices and convolution kernels use Glorot-uniform limits,
//! biases start at zero, and embedding tables draw from N(0, 0.02²).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

pub const EMBEDDING_STD: f64 = 0.02;

pub fn glorot_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-limit..=limit);
    }
    t
}

/// `[rows, cols]` weight matrix, fan-in `rows`, fan-out `cols`.
pub fn weight<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    glorot_uniform(&[rows, cols], rows, cols, rng)
}

/// `[kernel, c_in, c_out]` convolution kernel.
pub fn conv_kernel<R: Rng + ?Sized>(
    kernel: usize,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Tensor {
    glorot_uniform(&[kernel, c_in, c_out], kernel * c_in, kernel * c_out, rng)
}

pub fn embedding<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, EMBEDDING_STD).expect("valid std");
    let mut t = Tensor::zeros(&[rows, dim]);
    for v in t.data_mut() {
        *v = normal.sample(rng);
    }
    t
}

pub fn bias(len: usize) -> Tensor {
    Tensor::zeros(&[len])
}

pub fn ones(len: usize) -> Tensor {
    Tensor::full(&[len], 1.0)
}
