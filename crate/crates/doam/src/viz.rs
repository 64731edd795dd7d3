//! Attention-map and Grad-CAM visualization.
//!
//! Rendering conventions, fixed so regenerated images are byte-identical:
//!
//! * All float images live in `[0, 1]`; PNG quantization is
//!   `round(clamp(v) * 255)`.
//! * The heatmap colormap is piecewise-linear through five pinned stops —
//!   0.00 navy `(0, 0, 0.5)`, 0.25 azure `(0, 0.5, 1)`, 0.50 green
//!   `(0.5, 1, 0.5)`, 0.75 orange `(1, 0.5, 0)`, 1.00 dark red
//!   `(0.5, 0, 0)` — with inputs clamped to `[0, 1]`.
//! * Min-max normalization maps a zero-range image (all values equal,
//!   including the all-zero Grad-CAM of a constant output) to all zeros.

use crate::detector::DetectorCache;
use crate::doam::{softmax, DoamModule};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::pipeline::DetectionModel;
use ndarray::{Array2, Array3};
use std::io::Cursor;

/// Colormap stops: `(value, rgb)`, strictly increasing in value.
const STOPS: [(f64, [f64; 3]); 5] = [
    (0.00, [0.0, 0.0, 0.5]),
    (0.25, [0.0, 0.5, 1.0]),
    (0.50, [0.5, 1.0, 0.5]),
    (0.75, [1.0, 0.5, 0.0]),
    (1.00, [0.5, 0.0, 0.0]),
];

/// Maps `t ∈ [0, 1]` (clamped) onto the fixed heatmap palette.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let seg = STOPS.windows(2).find(|w| t <= w[1].0).expect("t ≤ 1");
    let (t0, ref c0) = seg[0];
    let (t1, ref c1) = seg[1];
    let f = (t - t0) / (t1 - t0);
    std::array::from_fn(|i| c0[i] + f * (c1[i] - c0[i]))
}

/// Rescales to `[0, 1]` by min/max; a zero-range input becomes all zeros.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() || max <= min {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - min) / (max - min))
}

/// Renders a `[0, 1]` map through the colormap to an RGB image.
pub fn heatmap(map: &Array2<f64>) -> Array3<f64> {
    let (h, w) = map.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| colormap(map[[y, x]])[c])
}

/// Equal-parts blend of the input image with the heatmap of `map`.
pub fn overlay(image: &Array3<f64>, map: &Array2<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if c != 3 || map.dim() != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            expected: format!("RGB image with map dims ({h}, {w})"),
            got: format!("{c} channels, map {:?}", map.dim()),
        });
    }
    let heat = heatmap(map);
    Ok(Array3::from_shape_fn((3, h, w), |idx| {
        0.5 * image[idx] + 0.5 * heat[idx]
    }))
}

/// Encodes a channels-first RGB float image as PNG bytes.
pub fn rgb_png_bytes(image: &Array3<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op: "rgb_png_bytes",
            expected: "3 channels".into(),
            got: format!("{c}"),
        });
    }
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in rgb.enumerate_pixels_mut() {
        for ch in 0..3 {
            px[ch] = quantize(image[[ch, y as usize, x as usize]]);
        }
    }
    let mut bytes = Cursor::new(Vec::new());
    image::DynamicImage::ImageRgb8(rgb)
        .write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(Error::Image)?;
    Ok(bytes.into_inner())
}

/// Encodes a `[0, 1]` map as a grayscale PNG.
pub fn gray_png_bytes(map: &Array2<f64>) -> Result<Vec<u8>> {
    let (h, w) = map.dim();
    let mut gray = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in gray.enumerate_pixels_mut() {
        px[0] = quantize(map[[y as usize, x as usize]]);
    }
    let mut bytes = Cursor::new(Vec::new());
    image::DynamicImage::ImageLuma8(gray)
        .write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(Error::Image)?;
    Ok(bytes.into_inner())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rendered views of one input: the image itself, its normalized edge
/// magnitude, the raw attention map, and the heatmap overlay.
#[derive(Debug, Clone)]
pub struct AttentionViz {
    pub input: Array3<f64>,
    /// Edge magnitude min-max normalized for display.
    pub edge: Array2<f64>,
    /// Attention map exactly as produced, every value in (0, 1).
    pub attention: Array2<f64>,
    pub overlay: Array3<f64>,
}

/// Runs the attention front-end on `image` and renders its views. All
/// outputs share the input's spatial dims.
pub fn attention_viz(doam: &DoamModule, image: &Array3<f64>) -> Result<AttentionViz> {
    let (_, cache) = doam.forward(image, Mode::Eval)?;
    let overlay = overlay(image, &cache.attention)?;
    Ok(AttentionViz {
        input: image.clone(),
        edge: min_max_normalize(&cache.edges.combined),
        attention: cache.attention,
        overlay,
    })
}

/// Grad-CAM over the feature map feeding the head that predicts the
/// top-confidence anchor.
///
/// The target scalar is that anchor's strongest foreground-class logit.
/// Channel weights are the spatial means of the target's gradient on the
/// feature map; the map is the ReLU of the weighted channel sum, upsampled
/// bilinearly to the input size and min-max normalized (an all-zero map —
/// e.g. from a constant-output head — stays all zeros).
pub fn grad_cam(model: &DetectionModel, image: &Array3<f64>) -> Result<Array2<f64>> {
    let (_, h, w) = image.dim();
    let (out, cache) = model.forward(image, Mode::Eval)?;
    let n = out.conf.dim().0;
    if n == 0 {
        return Err(Error::InvalidArgument {
            op: "grad_cam",
            reason: "model produced no anchors for this input".into(),
        });
    }

    // Top-confidence anchor and class by softmax score (background col 0
    // excluded); ties resolve to the earliest row then lowest class.
    let cols = out.conf.dim().1;
    let (mut best_row, mut best_col, mut best_score) = (0usize, 1usize, f64::NEG_INFINITY);
    for row in 0..n {
        let logits: Vec<f64> = (0..cols).map(|j| out.conf[[row, j]]).collect();
        let probs = softmax(&logits);
        for (col, &p) in probs.iter().enumerate().skip(1) {
            if p > best_score {
                (best_row, best_col, best_score) = (row, col, p);
            }
        }
    }

    let (feat, grad) = head_input_gradient(model, &cache.detector, (h, w), best_row, best_col)?;
    let cam = cam_from_grads(feat, &grad);
    Ok(min_max_normalize(&bilinear_upsample(&cam, (h, w))))
}

/// Backpropagates a one-hot gradient on `conf[row, col]` through the conf
/// conv of the head owning `row`, returning that head's input feature map
/// and the gradient arriving on it.
fn head_input_gradient<'a>(
    model: &DetectionModel,
    cache: &'a DetectorCache,
    input_hw: (usize, usize),
    row: usize,
    col: usize,
) -> Result<(&'a Array3<f64>, Array3<f64>)> {
    let det = &model.detector;
    let a = det.config.anchors.per_cell();
    let cols = det.config.num_classes + 1;
    let dims = det.feature_shapes(input_hw.0, input_hw.1);

    let mut offset = 0usize;
    for (head, &hb) in det.heads.iter().zip(&det.config.head_blocks) {
        let (fh, fw) = dims[hb];
        let count = fh * fw * a;
        if row < offset + count {
            // Rows flatten as y-major, then x, then anchor shape.
            let local = row - offset;
            let (cell, ai) = (local / a, local % a);
            let (y, x) = (cell / fw, cell % fw);
            let mut grad_raw = Array3::zeros((a * cols, fh, fw));
            grad_raw[[ai * cols + col, y, x]] = 1.0;
            let feat = &cache.blocks[hb].output;
            let (grad_feat, _) = head.conf.backward(feat, &grad_raw);
            return Ok((feat, grad_feat));
        }
        offset += count;
    }
    Err(Error::InvalidArgument {
        op: "grad_cam",
        reason: format!("anchor row {row} beyond the {offset} predicted"),
    })
}

/// Core Grad-CAM arithmetic: per-channel weights are the spatial means of
/// `grads`; the map is `ReLU(Σ_c weight_c · features_c)`.
pub fn cam_from_grads(features: &Array3<f64>, grads: &Array3<f64>) -> Array2<f64> {
    assert_eq!(features.dim(), grads.dim(), "feature/grad dims");
    let (c, h, w) = features.dim();
    let area = (h * w) as f64;
    let mut cam = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        let weight = grads.index_axis(ndarray::Axis(0), ch).sum() / area;
        for y in 0..h {
            for x in 0..w {
                cam[[y, x]] += weight * features[[ch, y, x]];
            }
        }
    }
    cam.mapv_into(|v| v.max(0.0))
}

/// Bilinear resize with half-pixel centers, clamped at the borders.
pub fn bilinear_upsample(map: &Array2<f64>, out_hw: (usize, usize)) -> Array2<f64> {
    let (ih, iw) = map.dim();
    let (oh, ow) = out_hw;
    if (ih, iw) == (oh, ow) {
        return map.clone();
    }
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = ((y as f64 + 0.5) * ih as f64 / oh as f64 - 0.5).clamp(0.0, (ih - 1) as f64);
        let sx = ((x as f64 + 0.5) * iw as f64 / ow as f64 - 0.5).clamp(0.0, (iw - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(ih - 1), (x0 + 1).min(iw - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bot = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::doam::DoamConfig;
    use crate::pipeline::ModelConfig;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    fn small_model(seed: u64) -> DetectionModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            doam: Some(DoamConfig {
                edge_blocks: 1,
                material_blocks: 1,
                edge_channels: 4,
                material_channels: 4,
                region_scales: vec![3, 5],
                ..DoamConfig::default()
            }),
            detector: DetectorConfig {
                in_channels: 4,
                num_classes: 3,
                channels: vec![6, 8],
                head_blocks: vec![1],
                ..DetectorConfig::default()
            },
        };
        DetectionModel::init(&mut rng, config).unwrap()
    }

    #[test]
    fn colormap_hits_its_pinned_stops() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(colormap(0.25), [0.0, 0.5, 1.0]);
        assert_eq!(colormap(0.5), [0.5, 1.0, 0.5]);
        assert_eq!(colormap(0.75), [1.0, 0.5, 0.0]);
        assert_eq!(colormap(1.0), [0.5, 0.0, 0.0]);
        // Clamping, and linearity inside a segment.
        assert_eq!(colormap(-3.0), colormap(0.0));
        assert_eq!(colormap(7.0), colormap(1.0));
        let mid = colormap(0.125);
        assert_eq!(mid, [0.0, 0.25, 0.75]);
    }

    #[test]
    fn normalization_pins_the_degenerate_cases() {
        let zeros = Array2::<f64>::zeros((3, 3));
        assert_eq!(min_max_normalize(&zeros), zeros);
        let constant = Array2::from_elem((2, 2), 4.2);
        assert_eq!(min_max_normalize(&constant), Array2::<f64>::zeros((2, 2)));
        let ramp = array![[1.0, 3.0], [5.0, 2.0]];
        let norm = min_max_normalize(&ramp);
        assert_eq!(norm, array![[0.0, 0.5], [1.0, 0.25]]);
    }

    #[test]
    fn zero_weight_model_gives_a_uniform_mid_heatmap() {
        let mut model = small_model(3);
        for (_, mut v) in model.named_params_mut() {
            v.fill(0.0);
        }
        let image = test_image(4, 24, 24);
        let viz = attention_viz(model.doam.as_ref().unwrap(), &image).unwrap();
        assert!(viz.attention.iter().all(|&m| m == 0.5));
        // Overlay = 0.5·input + 0.5·colormap(0.5) everywhere.
        let mid = colormap(0.5);
        for c in 0..3 {
            for y in 0..24 {
                for x in 0..24 {
                    let want = 0.5 * image[[c, y, x]] + 0.5 * mid[c];
                    assert!((viz.overlay[[c, y, x]] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn attention_outputs_share_the_input_dims() {
        let model = small_model(5);
        let image = test_image(6, 20, 28);
        let viz = attention_viz(model.doam.as_ref().unwrap(), &image).unwrap();
        assert_eq!(viz.attention.dim(), (20, 28));
        assert_eq!(viz.edge.dim(), (20, 28));
        assert_eq!(viz.overlay.dim(), (3, 20, 28));
        assert!(viz.attention.iter().all(|&m| m > 0.0 && m < 1.0));
        assert!(viz.edge.iter().all(|&e| (0.0..=1.0).contains(&e)));
    }

    #[test]
    fn rendering_twice_is_byte_identical() {
        let model = small_model(7);
        let image = test_image(8, 16, 16);
        let a = attention_viz(model.doam.as_ref().unwrap(), &image).unwrap();
        let b = attention_viz(model.doam.as_ref().unwrap(), &image).unwrap();
        assert_eq!(
            rgb_png_bytes(&a.overlay).unwrap(),
            rgb_png_bytes(&b.overlay).unwrap()
        );
        assert_eq!(
            gray_png_bytes(&a.edge).unwrap(),
            gray_png_bytes(&b.edge).unwrap()
        );
    }

    #[test]
    fn png_bytes_decode_back_to_the_quantized_image() {
        let image = test_image(9, 5, 7);
        let bytes = rgb_png_bytes(&image).unwrap();
        let decoded = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(decoded.dimensions(), (7, 5));
        for (x, y, px) in decoded.enumerate_pixels() {
            for c in 0..3 {
                assert_eq!(px[c], quantize(image[[c, y as usize, x as usize]]));
            }
        }
    }

    #[test]
    fn cam_arithmetic_matches_a_hand_computed_single_channel_case() {
        // One channel: weight = mean grad = 0.4, map = ReLU(0.4 · A).
        let features = array![[1.0, -2.0], [3.0, 4.0]]
            .into_shape_with_order((1, 2, 2))
            .unwrap();
        let grads = Array3::from_elem((1, 2, 2), 0.4);
        let cam = cam_from_grads(&features, &grads);
        let want = array![[0.4, 0.0], [1.2, 1.6]];
        for (got, want) in cam.iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        // Two channels sum before the ReLU.
        let f2 = array![[1.0, 1.0], [1.0, 1.0]];
        let features2 = ndarray::stack![ndarray::Axis(0), f2, f2];
        let mut grads2 = Array3::<f64>::zeros((2, 2, 2));
        grads2.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        grads2.index_axis_mut(ndarray::Axis(0), 1).fill(-3.0);
        let cam2 = cam_from_grads(&features2, &grads2);
        // Weighted sum 1·1 + (−3)·1 = −2 → ReLU → 0.
        assert_eq!(cam2, Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn upsample_interpolates_known_values() {
        let map = array![[0.0, 1.0], [2.0, 3.0]];
        assert_eq!(bilinear_upsample(&map, (2, 2)), map);
        let up = bilinear_upsample(&map, (4, 4));
        assert_eq!(up.dim(), (4, 4));
        // Corners clamp to the source corners.
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[3, 3]], 3.0);
        // Interior: src coords (0.25, 0.25) → bilinear of the 2×2 patch.
        let want = 0.75 * (0.75 * 0.0 + 0.25 * 1.0) + 0.25 * (0.75 * 2.0 + 0.25 * 3.0);
        assert!((up[[1, 1]] - want).abs() < 1e-12);
        let constant = Array2::from_elem((3, 3), 0.7);
        let const_up = bilinear_upsample(&constant, (9, 5));
        assert!(const_up.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn grad_cam_lands_in_range_and_matches_input_dims() {
        let model = small_model(11);
        let image = test_image(12, 24, 24);
        let cam = grad_cam(&model, &image).unwrap();
        assert_eq!(cam.dim(), (24, 24));
        assert!(cam.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Deterministic.
        assert_eq!(cam, grad_cam(&model, &image).unwrap());
    }

    #[test]
    fn constant_output_head_yields_an_all_zero_cam() {
        let mut model = small_model(13);
        // Zero every conf-conv weight and bias: logits become constant, so
        // the target's gradient on the features vanishes.
        for head in &mut model.detector.heads {
            head.conf.weight.fill(0.0);
            head.conf.bias.fill(0.0);
        }
        let image = test_image(14, 24, 24);
        let cam = grad_cam(&model, &image).unwrap();
        assert_eq!(cam, Array2::<f64>::zeros((24, 24)));
    }
}
