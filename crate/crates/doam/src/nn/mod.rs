//! Minimal f64 conv-net building blocks with explicit backward passes.
//!
//! Everything here is deliberately framework-free: each layer exposes
//! `forward` (returning a cache of whatever backward needs) and `backward`
//! (returning input gradients plus a mirror struct of parameter gradients).
//! Gradients are exact; the test suite checks every layer against central
//! finite differences.

pub mod act;
pub mod block;
pub mod conv;
pub mod init;
pub mod norm;
pub mod sgd;

pub use act::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use block::{ConvBlock, ConvBlockCache, ConvBlockGrad};
pub use conv::{conv_out_dim, Conv2d, Conv2dGrad};
pub use norm::{NormGrad, NormStats, SpatialNorm};
pub use sgd::Sgd;

use ndarray::{ArrayViewD, ArrayViewMutD};

/// Forward-pass mode. Training mode uses per-sample normalization statistics
/// and produces caches for backward; eval mode uses frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named read-only views over a set of arrays (dotted names).
pub type NamedViews<'a> = Vec<(String, ArrayViewD<'a, f64>)>;
/// Named mutable views over a set of arrays.
pub type NamedViewsMut<'a> = Vec<(String, ArrayViewMutD<'a, f64>)>;

/// Join a dotted prefix with a field name.
pub fn qualify(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
