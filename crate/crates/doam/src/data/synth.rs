//! Synthetic occluded-shapes dataset generator.
//!
//! A desk-scale stand-in for the real X-ray corpus: each image composites
//! translucent colored shapes over a bright background with multiplicative
//! blending (transmission images darken where objects overlap, so the
//! product is the closest cheap analog). Every image carries one or more
//! *target* shapes from a five-class list plus distractor clutter; clutter
//! drawn above a target occludes it, and the exact occluded-area fraction
//! `f` is computed from pixel masks and recorded in a `fractions.json`
//! sidecar. Test images are labeled OL1 (`f` below the low threshold),
//! OL2, or OL3 (`f` at or above the high threshold) and written into the
//! matching subset directory.
//!
//! Generation is parallel per image: each image draws from its own RNG
//! seeded by a hash of (global seed, image index), so output bytes are
//! identical no matter the thread count, and regeneration with the same
//! seed is byte-identical.

use crate::data::load::load_dataset;
use crate::data::types::{
    Annotation, Category, DatasetManifest, ImageRecord, OcclusionLevel, Split, SYNTH_CLASSES,
};
use crate::error::{Error, Result};
use crate::geom::Box2D;
use crate::parallel;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Boolean pixel mask, indexed `[y, x]`.
pub type Mask = Array2<bool>;

/// Fraction of the target's pixels covered by the union of the occluders
/// drawn above it.
pub fn occlusion_fraction(target: &Mask, occluders: &[Mask]) -> Result<f64> {
    let total = target.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(Error::InvalidArgument {
            op: "occlusion_fraction",
            reason: "target mask has no pixels".into(),
        });
    }
    for occ in occluders {
        if occ.dim() != target.dim() {
            return Err(Error::ShapeMismatch {
                op: "occlusion_fraction",
                expected: format!("{:?}", target.dim()),
                got: format!("{:?}", occ.dim()),
            });
        }
    }
    let covered = target
        .indexed_iter()
        .filter(|&((y, x), &p)| p && occluders.iter().any(|occ| occ[[y, x]]))
        .count();
    Ok(covered as f64 / total as f64)
}

/// Generator configuration. Defaults describe a 48×48 five-class corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// (height, width) of every image.
    pub image_size: (usize, usize),
    pub train_images: usize,
    pub test_images: usize,
    /// Scales how aggressively occluders are stacked on targets; 0 disables
    /// occlusion entirely.
    pub occlusion_density: f64,
    /// (low, high) occluded-fraction thresholds separating OL1/OL2/OL3.
    pub ol_thresholds: (f64, f64),
    /// Nominal target diameter in pixels.
    pub target_size: usize,
    /// Targets per training image; test images always carry exactly one so
    /// the image-level subset equals the target's level.
    pub targets_per_image: usize,
    /// Non-occluding distractor shapes drawn beneath the targets.
    pub clutter: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: (48, 48),
            train_images: 200,
            test_images: 60,
            occlusion_density: 1.0,
            ol_thresholds: (0.1, 0.5),
            target_size: 16,
            targets_per_image: 1,
            clutter: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let reason = if h < 16 || w < 16 {
            Some(format!("image size {h}x{w} below the 16x16 minimum"))
        } else if self.target_size < 6 {
            Some(format!("target size {} below the 6 px minimum", self.target_size))
        } else if self.target_size + 4 > h.min(w) {
            Some(format!(
                "target size {} does not fit a {h}x{w} image",
                self.target_size
            ))
        } else if self.targets_per_image == 0 {
            Some("targets_per_image must be ≥ 1".into())
        } else if !(self.occlusion_density.is_finite() && self.occlusion_density >= 0.0) {
            Some(format!("bad occlusion density {}", self.occlusion_density))
        } else if !(0.0 < self.ol_thresholds.0 && self.ol_thresholds.0 < self.ol_thresholds.1) {
            Some(format!("bad OL thresholds {:?}", self.ol_thresholds))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidArgument {
                op: "SynthConfig::validate",
                reason,
            }),
            None => Ok(()),
        }
    }
}

/// splitmix64 finalizer; decorrelates consecutive indices into full-width
/// seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-image RNG seed: hash of the global seed and the image's index.
pub fn per_image_seed(global_seed: u64, image_index: u64) -> u64 {
    splitmix64(global_seed ^ splitmix64(image_index))
}

/// Shape classes with their membership tests in rotated local coordinates
/// and class-distinctive attenuation tints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Blade,
    Disc,
    Ring,
    Wedge,
    Cross,
}

const SHAPES: [Shape; 5] = [Shape::Blade, Shape::Disc, Shape::Ring, Shape::Wedge, Shape::Cross];

impl Shape {
    fn class_name(self) -> &'static str {
        SYNTH_CLASSES[self as usize]
    }

    /// Is local point (dx, dy) inside the shape of diameter `s`?
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        let half = s / 2.0;
        match self {
            Shape::Blade => dx.abs() <= half && dy.abs() <= s / 6.0,
            Shape::Disc => dx * dx + dy * dy <= half * half,
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                let inner = s / 4.0;
                r2 <= half * half && r2 >= inner * inner
            }
            Shape::Wedge => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
            Shape::Cross => {
                let arm = s / 6.0;
                (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
            }
        }
    }

    /// Attenuation tint: metals image blue-ish, organics orange-ish.
    fn tint(self) -> [f64; 3] {
        match self {
            Shape::Blade => [0.45, 0.55, 0.85],
            Shape::Disc => [0.85, 0.60, 0.35],
            Shape::Ring => [0.40, 0.75, 0.55],
            Shape::Wedge => [0.80, 0.45, 0.70],
            Shape::Cross => [0.55, 0.50, 0.45],
        }
    }
}

/// Rasterizes `shape` rotated by `angle` at `center`, returning the mask.
fn rasterize(
    shape: Shape,
    center: (f64, f64),
    size: f64,
    angle: f64,
    dims: (usize, usize),
) -> Mask {
    let (h, w) = dims;
    let (cos, sin) = (angle.cos(), angle.sin());
    Array2::from_shape_fn((h, w), |(y, x)| {
        let px = x as f64 + 0.5 - center.0;
        let py = y as f64 + 0.5 - center.1;
        let dx = px * cos + py * sin;
        let dy = -px * sin + py * cos;
        shape.contains(dx, dy, size)
    })
}

/// Tight pixel bounding box of a mask (exclusive upper edges).
fn mask_bbox(mask: &Mask) -> Option<Box2D> {
    let (mut x1, mut y1) = (usize::MAX, usize::MAX);
    let (mut x2, mut y2) = (0usize, 0usize);
    let mut any = false;
    for ((y, x), &p) in mask.indexed_iter() {
        if p {
            any = true;
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
        }
    }
    any.then(|| Box2D::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
}

/// Multiplies `tint` into `img` under `mask` (multiplicative blending; the
/// product is order-independent, z-order matters only for occlusion
/// accounting).
fn composite(img: &mut Array3<f64>, mask: &Mask, tint: [f64; 3]) {
    for ((y, x), &inside) in mask.indexed_iter() {
        if inside {
            for c in 0..3 {
                img[[c, y, x]] *= tint[c];
            }
        }
    }
}

/// Everything produced for one image before it touches disk.
struct RenderedImage {
    png: Vec<u8>,
    annotations: Vec<(Category, Box2D)>,
    fractions: Vec<f64>,
    level: OcclusionLevel,
}

fn render_image(cfg: &SynthConfig, seed: u64, targets: usize) -> RenderedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = cfg.image_size;
    // Bright background with a gentle illumination gradient and faint noise.
    let (gx, gy): (f64, f64) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
    let mut img = Array3::from_shape_fn((3, h, w), |(_, y, x)| {
        0.93 + gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5)
    });
    for v in img.iter_mut() {
        *v += rng.gen_range(-0.01..0.01);
    }

    let jitter =
        |rng: &mut ChaCha8Rng, t: [f64; 3]| t.map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.05, 0.98));

    // Under-clutter: distractors beneath the targets, never occluding.
    for _ in 0..cfg.clutter {
        let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
        let size = rng.gen_range(4.0..cfg.target_size as f64);
        let center = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let mask = rasterize(shape, center, size, angle, (h, w));
        let gray = rng.gen_range(0.70..0.95);
        composite(&mut img, &mask, jitter(&mut rng, [gray, gray * 0.95, gray * 0.9]));
    }

    // Targets.
    let margin = cfg.target_size as f64 / 2.0 + 2.0;
    let mut annotations = Vec::with_capacity(targets);
    let mut fractions = Vec::with_capacity(targets);
    let mut worst = OcclusionLevel::Level1;
    for _ in 0..targets {
        let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
        let size = cfg.target_size as f64 * rng.gen_range(0.8..1.0);
        let center = (
            rng.gen_range(margin..w as f64 - margin),
            rng.gen_range(margin..h as f64 - margin),
        );
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let mask = rasterize(shape, center, size, angle, (h, w));
        composite(&mut img, &mask, jitter(&mut rng, shape.tint()));

        // Occluders above the target: count and footprint grow with the
        // per-image aim so the fraction spreads across all three bands.
        let mut occluder_masks = Vec::new();
        if cfg.occlusion_density > 0.0 {
            let aim: f64 = rng.gen_range(0.0..cfg.occlusion_density.min(1.0));
            let n_occ = (aim * 5.0).ceil() as usize;
            for _ in 0..n_occ {
                let occ_shape = SHAPES[rng.gen_range(0..SHAPES.len())];
                let occ_size = size * rng.gen_range(0.4 + 0.6 * aim..0.6 + 0.9 * aim);
                let occ_center = (
                    center.0 + rng.gen_range(-size / 2.0..size / 2.0) * (1.0 - aim),
                    center.1 + rng.gen_range(-size / 2.0..size / 2.0) * (1.0 - aim),
                );
                let occ_angle = rng.gen_range(0.0..std::f64::consts::PI);
                let occ_mask = rasterize(occ_shape, occ_center, occ_size, occ_angle, (h, w));
                // Denser aims stack darker material, the way dense objects
                // crush the signal in transmission imagery.
                let gray = rng.gen_range(0.75 - 0.5 * aim..0.95 - 0.5 * aim);
                composite(&mut img, &occ_mask, jitter(&mut rng, [gray, gray, gray * 1.05]));
                occluder_masks.push(occ_mask);
            }
        }
        let f = occlusion_fraction(&mask, &occluder_masks).expect("target mask is non-empty");
        let level = OcclusionLevel::from_fraction(f, cfg.ol_thresholds);
        if level > worst {
            worst = level;
        }
        let bbox = mask_bbox(&mask).expect("target mask is non-empty");
        annotations.push((Category::new(shape.class_name()).expect("static name"), bbox));
        fractions.push(f);
    }

    // Quantize to 8-bit RGB and encode as PNG.
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in rgb.enumerate_pixels_mut() {
        let at = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        *px = image::Rgb([at(0), at(1), at(2)]);
    }
    let mut png = Vec::new();
    rgb.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    RenderedImage {
        png,
        annotations,
        fractions,
        level: worst,
    }
}

fn write_split(
    root: &Path,
    split: Split,
    cfg: &SynthConfig,
    rendered: Vec<(String, RenderedImage)>,
) -> Result<(Vec<ImageRecord>, DatasetManifest)> {
    let split_dir = root.join(split.dir_name());
    let mut records = Vec::with_capacity(rendered.len());
    let mut fractions: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (image_id, img) in rendered {
        // Test images land in their occlusion subset; training images stay
        // flat (occlusion is only published for the test split).
        let base = match (split, img.level.dir_name()) {
            (Split::Test, Some(dir)) => split_dir.join(dir),
            _ => split_dir.clone(),
        };
        let record_level = match split {
            Split::Test => img.level,
            Split::Train => OcclusionLevel::Unknown,
        };
        let images_dir = base.join("images");
        let ann_dir = base.join("annotations");
        std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        std::fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
        let image_path = images_dir.join(format!("{image_id}.png"));
        std::fs::write(&image_path, &img.png).map_err(|e| Error::io(&image_path, e))?;
        let mut lines = String::new();
        for (cat, bbox) in &img.annotations {
            lines.push_str(&format!(
                "{} {} {} {} {}\n",
                cat,
                bbox.x1 as i64,
                bbox.y1 as i64,
                bbox.x2 as i64,
                bbox.y2 as i64
            ));
        }
        let ann_path = ann_dir.join(format!("{image_id}.txt"));
        std::fs::write(&ann_path, lines).map_err(|e| Error::io(&ann_path, e))?;
        fractions.insert(image_id.clone(), img.fractions.clone());
        records.push(ImageRecord {
            image_id: image_id.clone(),
            image_path,
            width: cfg.image_size.1,
            height: cfg.image_size.0,
            occlusion_level: record_level,
            annotations: img
                .annotations
                .iter()
                .map(|(cat, bbox)| Annotation {
                    image_id: image_id.clone(),
                    category: cat.clone(),
                    bbox: *bbox,
                    occlusion_level: record_level,
                })
                .collect(),
        });
    }
    // Loader returns flat-then-OL1..OL3 order; mirror it so round-trip
    // comparisons are positional.
    records.sort_by_key(|r| (r.occlusion_level, r.image_id.clone()));
    let classes: Vec<String> = SYNTH_CLASSES.iter().map(|s| s.to_string()).collect();
    let manifest = DatasetManifest::from_records(split, &classes, &records);
    let manifest_path = split_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    let fractions_path = split_dir.join("fractions.json");
    std::fs::write(&fractions_path, serde_json::to_string_pretty(&fractions)?)
        .map_err(|e| Error::io(&fractions_path, e))?;
    Ok((records, manifest))
}

/// Generated records and manifests, in loader order.
pub struct SynthOutput {
    pub train_records: Vec<ImageRecord>,
    pub train_manifest: DatasetManifest,
    pub test_records: Vec<ImageRecord>,
    pub test_manifest: DatasetManifest,
}

/// Generates the dataset under `root` and writes the loader layout plus
/// `manifest.json` and `fractions.json` per split.
pub fn generate_synthetic(root: &Path, cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let train: Vec<(String, RenderedImage)> = parallel::map_indexed(cfg.train_images, |i| {
        (
            format!("train_{i:05}"),
            render_image(cfg, per_image_seed(seed, i as u64), cfg.targets_per_image),
        )
    });
    // Test indices continue after train so the two splits draw from
    // disjoint per-image streams; test images carry exactly one target so
    // the image's subset is its target's level.
    let base = cfg.train_images as u64;
    let test: Vec<(String, RenderedImage)> = parallel::map_indexed(cfg.test_images, |i| {
        (
            format!("test_{i:05}"),
            render_image(cfg, per_image_seed(seed, base + i as u64), 1),
        )
    });
    let (train_records, train_manifest) = write_split(root, Split::Train, cfg, train)?;
    let (test_records, test_manifest) = write_split(root, Split::Test, cfg, test)?;
    Ok(SynthOutput {
        train_records,
        train_manifest,
        test_records,
        test_manifest,
    })
}

/// Convenience: generate into `root` and immediately re-load both splits.
pub fn generate_and_load(
    root: &Path,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    generate_synthetic(root, cfg, seed)?;
    let (train, _) = load_dataset(root, Split::Train)?;
    let (test, _) = load_dataset(root, Split::Test)?;
    Ok((train, test))
}
