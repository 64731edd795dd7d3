//! Dataset loading, distribution validation, and the synthetic
//! occluded-shapes substitute generator.

mod load;
mod synth;
mod types;

use crate::error::Result;
use ndarray::Array3;
use std::path::Path;

/// Loads an image file as a channels-first f64 array scaled to [0, 1].
pub fn load_image_chw(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, y, x)| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0,
    ))
}

pub use load::{
    load_dataset, validate_distribution, ExpectedDistribution, Mismatch, ValidationReport,
};
pub use synth::{
    generate_and_load, generate_synthetic, occlusion_fraction, per_image_seed, Mask, SynthConfig,
    SynthOutput,
};
pub use types::{
    Annotation, Category, DatasetManifest, ImageRecord, OcclusionLevel, Split, SYNTH_CLASSES,
    XRAY_CLASSES,
};
