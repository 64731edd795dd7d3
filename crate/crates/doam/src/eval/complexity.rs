//! Model complexity accounting: exact parameter counts, serialized size,
//! and FLOPs by per-layer multiply-add counting.
//!
//! Counting policy:
//! - Convolution: `2·k²·C_in·C_out·H_out·W_out` multiply-adds, plus one
//!   FLOP per output element when the layer has a bias.
//! - Pooling, activations, normalization passes, and other elementwise
//!   stages: one FLOP per output element per stage (normalization counts
//!   two stages, standardize and affine).

use crate::checkpoint::model_to_archive;
use crate::error::Result;
use crate::nn::{conv_out_dim, Conv2d, ConvBlock};
use crate::pipeline::DetectionModel;
use serde::{Deserialize, Serialize};

/// FLOPs of one convolution producing an `h_out` × `w_out` map.
pub fn conv_flops(
    k: usize,
    c_in: usize,
    c_out: usize,
    h_out: usize,
    w_out: usize,
    bias: bool,
) -> f64 {
    let out_elems = (c_out * h_out * w_out) as f64;
    2.0 * (k * k * c_in) as f64 * out_elems + if bias { out_elems } else { 0.0 }
}

fn conv2d_cost(conv: &Conv2d, input_hw: (usize, usize)) -> (f64, (usize, usize)) {
    let (h, w) = input_hw;
    let k = conv.kernel();
    let h_out = conv_out_dim(h, k, conv.stride, conv.padding);
    let w_out = conv_out_dim(w, k, conv.stride, conv.padding);
    (
        conv_flops(k, conv.in_channels(), conv.out_channels(), h_out, w_out, true),
        (h_out, w_out),
    )
}

/// Parameters, FLOPs, and output size of a conv-block chain. An empty chain
/// is a zero-layer model: zero parameters, zero FLOPs, identity size.
pub fn blocks_cost(blocks: &[ConvBlock], input_hw: (usize, usize)) -> (usize, f64, (usize, usize)) {
    let mut params = 0usize;
    let mut flops = 0.0;
    let mut hw = input_hw;
    for block in blocks {
        params += block.param_count();
        let (conv, out_hw) = conv2d_cost(&block.conv, hw);
        hw = out_hw;
        let elems = (block.out_channels() * hw.0 * hw.1) as f64;
        // conv + (standardize + affine when normalized) + ReLU.
        flops += conv + if block.norm.is_some() { 2.0 * elems } else { 0.0 } + elems;
    }
    (params, flops, hw)
}

/// Cost of one model component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub params: usize,
    pub flops: f64,
}

/// Complexity summary at a stated input resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// (channels, height, width) the FLOPs are counted at.
    pub input_shape: (usize, usize, usize),
    pub params: usize,
    /// Serialized checkpoint size in decimal megabytes (10⁶ bytes).
    pub size_mb: f64,
    pub gflops: f64,
    /// Attention front end, when the model has one.
    pub front_end: Option<ComponentCost>,
    pub detector: ComponentCost,
}

/// FLOPs of the attention front end on a `C`×`h`×`w` image.
fn doam_flops(m: &crate::doam::DoamModule, h: usize, w: usize) -> f64 {
    let cfg = &m.config;
    let hw = (h * w) as f64;
    let mut flops = 0.0;
    // Luminance mean, two fixed 3×3 derivative kernels, magnitude.
    flops += hw;
    flops += 2.0 * conv_flops(3, 1, 1, h, w, false);
    flops += hw;
    // Edge guidance blocks on the edge plane.
    let (_, eg_flops, _) = blocks_cost(&m.eg, (h, w));
    flops += eg_flops;
    // Material awareness blocks on the C+1 stack.
    let (_, ma_flops, _) = blocks_cost(&m.ma, (h, w));
    flops += ma_flops;
    // Per region scale: tile aggregation (one FLOP per element), the gate
    // conv on the 2·C_r concat, its spatial mean, and a sigmoid.
    let cr = cfg.material_channels;
    for _ in &cfg.region_scales {
        flops += cr as f64 * hw;
        let (gate, _) = conv2d_cost(&m.gate, (h, w));
        flops += gate + hw + 1.0;
    }
    // Softmax over |K| logits, then the weighted candidate sum.
    let k_count = cfg.region_scales.len() as f64;
    flops += k_count + k_count * cr as f64 * hw;
    // Fusion conv on concat(A, B1, B2), sigmoid, and the attention product
    // over the C+1 output channels.
    let (fuse, _) = conv2d_cost(&m.fuse, (h, w));
    flops += fuse + hw + (cfg.input_channels + 1) as f64 * hw;
    flops
}

fn detector_flops(d: &crate::detector::Detector, h: usize, w: usize) -> f64 {
    let (_, backbone, _) = blocks_cost(&d.backbone, (h, w));
    let shapes = d.feature_shapes(h, w);
    let mut flops = backbone;
    for (head, &block_idx) in d.heads.iter().zip(&d.config.head_blocks) {
        let (fh, fw) = shapes[block_idx];
        let (loc, _) = conv2d_cost(&head.loc, (fh, fw));
        let (conf, _) = conv2d_cost(&head.conf, (fh, fw));
        flops += loc + conf;
    }
    flops
}

/// Builds the complexity report for a model at `input_hw`.
pub fn complexity_report(
    model: &DetectionModel,
    input_hw: (usize, usize),
) -> Result<ComplexityReport> {
    let (h, w) = input_hw;
    let front_end = model.doam.as_ref().map(|m| ComponentCost {
        params: m.param_count(),
        flops: doam_flops(m, h, w),
    });
    let detector = ComponentCost {
        params: model.detector.param_count(),
        flops: detector_flops(&model.detector, h, w),
    };
    let total_flops = front_end.map_or(0.0, |c| c.flops) + detector.flops;
    let in_channels = model
        .doam
        .as_ref()
        .map_or(model.detector.config.in_channels, |m| m.config.input_channels);
    Ok(ComplexityReport {
        input_shape: (in_channels, h, w),
        params: model.param_count(),
        size_mb: model_to_archive(model).to_bytes().len() as f64 / 1e6,
        gflops: total_flops / 1e9,
        front_end,
        detector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::pipeline::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_conv_hand_count() {
        // 3×3 conv, 1→1 channel, 8×8 output, no bias: 2·9·64 = 1152.
        assert_eq!(conv_flops(3, 1, 1, 8, 8, false), 1152.0);
        // With a bias the 64 output elements add one FLOP each.
        assert_eq!(conv_flops(3, 1, 1, 8, 8, true), 1216.0);
    }

    #[test]
    fn zero_layer_chain_costs_nothing() {
        let (params, flops, hw) = blocks_cost(&[], (48, 48));
        assert_eq!(params, 0);
        assert_eq!(flops, 0.0);
        assert_eq!(hw, (48, 48));
    }

    #[test]
    fn front_end_params_match_the_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let cfg = ModelConfig::with_doam(5);
        let closed_form = cfg.doam.as_ref().unwrap().param_count_closed_form();
        let model = DetectionModel::init(&mut rng, cfg).unwrap();
        let report = complexity_report(&model, (48, 48)).unwrap();
        let front_end = report.front_end.unwrap();
        assert_eq!(front_end.params, closed_form);
        assert_eq!(report.params, front_end.params + report.detector.params);
    }

    #[test]
    fn front_end_flops_match_a_hand_derived_sum() {
        // Desk defaults: C=3, N1=N2=2, C_e=C_r=16, K={5,10,15}, 48×48
        // input, all spatial maps stay 48×48 (stride-1, padding-1 blocks).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = DetectionModel::init(&mut rng, ModelConfig::with_doam(5)).unwrap();
        let hw = 48.0 * 48.0;
        let conv = |k: f64, cin: f64, cout: f64| 2.0 * k * k * cin * cout * hw + cout * hw;
        let mut expect = 0.0;
        expect += hw; // luminance
        expect += 2.0 * 2.0 * 9.0 * hw; // two bias-free derivative kernels
        expect += hw; // gradient magnitude
        // EG: 1→16 then 16→16, each + norm (2/elem) + ReLU (1/elem).
        expect += conv(3.0, 1.0, 16.0) + 3.0 * 16.0 * hw;
        expect += conv(3.0, 16.0, 16.0) + 3.0 * 16.0 * hw;
        // MA: 4→16 then 16→16.
        expect += conv(3.0, 4.0, 16.0) + 3.0 * 16.0 * hw;
        expect += conv(3.0, 16.0, 16.0) + 3.0 * 16.0 * hw;
        // Three region scales: aggregation + gate conv (32→1) + mean + sigmoid.
        expect += 3.0 * (16.0 * hw + conv(3.0, 32.0, 1.0) + hw + 1.0);
        // Softmax over 3 logits and the weighted candidate sum.
        expect += 3.0 + 3.0 * 16.0 * hw;
        // Fusion 1×1 conv (48→1), sigmoid, attention product over 4 channels.
        expect += conv(1.0, 48.0, 1.0) + hw + 4.0 * hw;
        let report = complexity_report(&model, (48, 48)).unwrap();
        assert_eq!(report.front_end.unwrap().flops, expect);
    }

    #[test]
    fn size_tracks_value_count_within_container_overhead() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = DetectionModel::init(&mut rng, ModelConfig::detector_only(5)).unwrap();
        let report = complexity_report(&model, (48, 48)).unwrap();
        let buffer_values: usize = model.named_buffers().iter().map(|(_, v)| v.len()).sum();
        let value_bytes = ((report.params + buffer_values) * 8) as f64;
        let size_bytes = report.size_mb * 1e6;
        assert!(size_bytes >= value_bytes);
        // Names, shapes, and the header stay under 5% for this model.
        assert!(size_bytes < value_bytes * 1.05, "overhead too large: {size_bytes} vs {value_bytes}");
    }

    #[test]
    fn report_is_consistent_and_serializable() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let model = DetectionModel::init(&mut rng, ModelConfig::with_doam(5)).unwrap();
        let report = complexity_report(&model, (48, 48)).unwrap();
        assert!(report.gflops > 0.0);
        assert_eq!(
            report.gflops,
            (report.front_end.unwrap().flops + report.detector.flops) / 1e9
        );
        let json = serde_json::to_string(&report).unwrap();
        let back: ComplexityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.params, report.params);
        // The detector dominates: the front end is a small additive cost.
        let ratio = report.front_end.unwrap().params as f64 / report.params as f64;
        assert!(ratio < 0.5, "front end should be the smaller component, ratio {ratio}");

        // Forward actually runs at the stated resolution (the report and
        // the model agree on geometry).
        let x = ndarray::Array3::zeros((3, 48, 48));
        assert!(model.forward(&x, Mode::Eval).is_ok());
    }
}
