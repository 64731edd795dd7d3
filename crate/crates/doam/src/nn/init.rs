//! Deterministic parameter initialization.

use ndarray::{Array1, Array4};
use rand::Rng;

use super::conv::Conv2d;

/// Kaiming-uniform style init: weights and bias in `±sqrt(1/fan_in)`.
pub fn conv2d<R: Rng>(
    rng: &mut R,
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Conv2d {
    let bound = (1.0 / (c_in * k * k) as f64).sqrt();
    let weight = Array4::from_shape_fn((c_out, c_in, k, k), |_| rng.gen_range(-bound..bound));
    let bias = Array1::from_shape_fn(c_out, |_| rng.gen_range(-bound..bound));
    Conv2d::new(weight, bias, stride, padding)
}
