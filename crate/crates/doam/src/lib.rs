//! Over-sampling de-occlusion attention for X-ray object detection.
//!
//! The crate implements a small, fully deterministic detection stack in
//! plain Rust: a de-occlusion attention module that refines images with
//! edge and material cues before detection ([`doam`]), a single-shot
//! detector with anchor matching and hard-negative mining ([`detector`]),
//! an over-sampling training loop that replays hard batches ([`train`]),
//! dataset generation/validation utilities ([`data`]), VOC-style evaluation
//! ([`eval`]), attention/Grad-CAM visualization ([`viz`]), and a
//! deterministic checkpoint format ([`checkpoint`]).
//!
//! Everything is f64 with hand-written backward passes validated against
//! finite differences. All parallel sections (enabled by the default
//! `parallel` feature) write disjoint outputs and reduce in a fixed order,
//! so results are bit-identical with and without the feature and for any
//! thread count.

pub mod checkpoint;
pub mod commands;
pub mod data;
pub mod detector;
pub mod doam;
pub mod error;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
