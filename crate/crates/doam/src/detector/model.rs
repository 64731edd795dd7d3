//! Compact anchor-based single-stage detector.
//!
//! A short conv-block backbone halves resolution from the second block on;
//! detection heads (one 3×3 loc conv + one 3×3 conf conv) read from the
//! blocks named in the config, giving two or three feature strides. The
//! detector consumes either the raw image or the attention-refined map — it
//! only cares about its configured input channel count.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::anchors::{grid_anchors, Anchor, AnchorSpec};
use crate::error::{Error, Result};
use crate::nn::block::{ConvBlock, ConvBlockCache, ConvBlockGrad};
use crate::nn::conv::{conv_out_dim, Conv2d, Conv2dGrad};
use crate::nn::{init, qualify, Mode, NamedViews, NamedViewsMut};

/// Architecture and anchor layout of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Channels of the input map (C for raw images, C+1 behind attention).
    pub in_channels: usize,
    /// Foreground classes; logits carry one extra background column.
    pub num_classes: usize,
    /// Backbone widths. The first block keeps resolution, later blocks halve
    /// it, so block `i` sits at stride `2^i`.
    pub channels: Vec<usize>,
    /// Indices of backbone blocks that feed detection heads, ascending.
    pub head_blocks: Vec<usize>,
    pub anchors: AnchorSpec,
    pub with_norm: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 5,
            channels: vec![12, 16, 24, 32, 32],
            head_blocks: vec![3, 4],
            anchors: AnchorSpec::default(),
            with_norm: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidArgument {
                op: "DetectorConfig::validate",
                reason,
            })
        };
        if self.in_channels == 0 || self.num_classes == 0 {
            return fail("in_channels and num_classes must be positive".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return fail("channels must be non-empty and positive".into());
        }
        if self.head_blocks.is_empty()
            || !self.head_blocks.windows(2).all(|w| w[0] < w[1])
            || *self.head_blocks.last().unwrap() >= self.channels.len()
        {
            return fail(format!(
                "head_blocks {:?} must be ascending indices into {} blocks",
                self.head_blocks,
                self.channels.len()
            ));
        }
        if self.anchors.scales.is_empty()
            || self.anchors.ratios.is_empty()
            || self.anchors.scales.iter().any(|&s| s <= 0.0)
            || self.anchors.ratios.iter().any(|&r| r <= 0.0)
        {
            return fail("anchor scales and ratios must be positive and non-empty".into());
        }
        Ok(())
    }

    /// Closed-form parameter count (convs, biases, affine norm pairs, heads).
    pub fn param_count_closed_form(&self) -> usize {
        let norm = |c: usize| if self.with_norm { 2 * c } else { 0 };
        let conv = |c_in: usize, c_out: usize| 9 * c_in * c_out + c_out;
        let mut total = 0;
        let mut prev = self.in_channels;
        for &c in &self.channels {
            total += conv(prev, c) + norm(c);
            prev = c;
        }
        let a = self.anchors.per_cell();
        for &hb in &self.head_blocks {
            let c = self.channels[hb];
            total += conv(c, 4 * a); // loc head
            total += conv(c, (self.num_classes + 1) * a); // conf head
        }
        total
    }
}

/// One detection head: box regression and class logits.
#[derive(Debug, Clone)]
pub struct Head {
    pub loc: Conv2d,
    pub conf: Conv2d,
}

/// The detector with owned parameters.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Vec<ConvBlock>,
    pub heads: Vec<Head>,
}

/// Flattened predictions: one row per anchor.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// Box offsets, shape (num_anchors, 4).
    pub loc: Array2<f64>,
    /// Class logits including background column 0, shape
    /// (num_anchors, num_classes + 1).
    pub conf: Array2<f64>,
}

/// Forward cache for [`Detector::backward`].
#[derive(Debug, Clone)]
pub struct DetectorCache {
    pub blocks: Vec<ConvBlockCache>,
    pub input_hw: (usize, usize),
}

/// Parameter gradients mirroring [`Detector`].
#[derive(Debug, Clone)]
pub struct DetectorGrads {
    pub backbone: Vec<ConvBlockGrad>,
    pub heads: Vec<(Conv2dGrad, Conv2dGrad)>,
}

impl Detector {
    pub fn init<R: Rng>(rng: &mut R, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut backbone = Vec::with_capacity(config.channels.len());
        let mut prev = config.in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            backbone.push(ConvBlock::init(rng, prev, c, stride, config.with_norm));
            prev = c;
        }
        let a = config.anchors.per_cell();
        let heads = config
            .head_blocks
            .iter()
            .map(|&hb| {
                let c = config.channels[hb];
                Head {
                    loc: init::conv2d(rng, 4 * a, c, 3, 1, 1),
                    conf: init::conv2d(rng, (config.num_classes + 1) * a, c, 3, 1, 1),
                }
            })
            .collect();
        Ok(Self {
            config,
            backbone,
            heads,
        })
    }

    /// Spatial dims after each backbone block for an (h, w) input.
    pub fn feature_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.backbone.len());
        let (mut ch, mut cw) = (h, w);
        for (i, _) in self.backbone.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            ch = conv_out_dim(ch, 3, stride, 1);
            cw = conv_out_dim(cw, 3, stride, 1);
            dims.push((ch, cw));
        }
        dims
    }

    /// All anchors for an (h, w) input, in head/cell/shape order — the same
    /// order the outputs are flattened in.
    pub fn anchors(&self, h: usize, w: usize) -> Vec<Anchor> {
        let dims = self.feature_shapes(h, w);
        let mut anchors = Vec::new();
        for &hb in &self.config.head_blocks {
            let stride = 1usize << hb;
            anchors.extend(grid_anchors((h, w), stride, dims[hb], &self.config.anchors));
        }
        anchors
    }

    pub fn num_anchors(&self, h: usize, w: usize) -> usize {
        let dims = self.feature_shapes(h, w);
        let a = self.config.anchors.per_cell();
        self.config
            .head_blocks
            .iter()
            .map(|&hb| dims[hb].0 * dims[hb].1 * a)
            .sum()
    }

    pub fn forward(&self, x: &Array3<f64>, mode: Mode) -> Result<(DetectorOutput, DetectorCache)> {
        let (c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "Detector::forward",
                expected: format!("{} channels", self.config.in_channels),
                got: format!("{c} channels"),
            });
        }
        let mut blocks = Vec::with_capacity(self.backbone.len());
        let mut cur = x.clone();
        for block in &self.backbone {
            let (next, cache) = block.forward(&cur, mode);
            blocks.push(cache);
            cur = next;
        }
        let a = self.config.anchors.per_cell();
        let cols = self.config.num_classes + 1;
        let total = self.num_anchors(h, w);
        let mut loc = Array2::zeros((total, 4));
        let mut conf = Array2::zeros((total, cols));
        let mut row = 0;
        for (head, &hb) in self.heads.iter().zip(&self.config.head_blocks) {
            let feat = &blocks[hb].output;
            let loc_raw = head.loc.forward(feat);
            let conf_raw = head.conf.forward(feat);
            let (_, fh, fw) = loc_raw.dim();
            for y in 0..fh {
                for xc in 0..fw {
                    for ai in 0..a {
                        for j in 0..4 {
                            loc[[row, j]] = loc_raw[[ai * 4 + j, y, xc]];
                        }
                        for j in 0..cols {
                            conf[[row, j]] = conf_raw[[ai * cols + j, y, xc]];
                        }
                        row += 1;
                    }
                }
            }
        }
        debug_assert_eq!(row, total);
        Ok((
            DetectorOutput { loc, conf },
            DetectorCache {
                blocks,
                input_hw: (h, w),
            },
        ))
    }

    /// Input gradient plus parameter gradients from flattened output grads.
    pub fn backward(
        &self,
        cache: &DetectorCache,
        grad_loc: &Array2<f64>,
        grad_conf: &Array2<f64>,
    ) -> (Array3<f64>, DetectorGrads) {
        let a = self.config.anchors.per_cell();
        let cols = self.config.num_classes + 1;

        // Per-block output gradient accumulators.
        let mut block_grads: Vec<Array3<f64>> = self
            .backbone
            .iter()
            .zip(cache.blocks.iter())
            .map(|(_, bc)| Array3::zeros(bc.output.dim()))
            .collect();

        // Heads: unflatten row gradients back to conv planes and push them
        // through the head convs.
        let mut head_grads = Vec::with_capacity(self.heads.len());
        let mut row = 0;
        for (head, &hb) in self.heads.iter().zip(&self.config.head_blocks) {
            let feat = &cache.blocks[hb].output;
            let (_, fh, fw) = feat.dim();
            let mut loc_raw = Array3::zeros((a * 4, fh, fw));
            let mut conf_raw = Array3::zeros((a * cols, fh, fw));
            for y in 0..fh {
                for xc in 0..fw {
                    for ai in 0..a {
                        for j in 0..4 {
                            loc_raw[[ai * 4 + j, y, xc]] = grad_loc[[row, j]];
                        }
                        for j in 0..cols {
                            conf_raw[[ai * cols + j, y, xc]] = grad_conf[[row, j]];
                        }
                        row += 1;
                    }
                }
            }
            let (gfeat_loc, gl) = head.loc.backward(feat, &loc_raw);
            let (gfeat_conf, gc) = head.conf.backward(feat, &conf_raw);
            block_grads[hb] += &gfeat_loc;
            block_grads[hb] += &gfeat_conf;
            head_grads.push((gl, gc));
        }

        // Backbone, reversed, accumulating skip contributions from heads.
        let mut backbone_grads = vec![None; self.backbone.len()];
        let mut upstream: Option<Array3<f64>> = None;
        for (i, block) in self.backbone.iter().enumerate().rev() {
            let mut g = block_grads[i].clone();
            if let Some(u) = upstream.take() {
                g += &u;
            }
            let (gin, bg) = block.backward(&cache.blocks[i], &g);
            backbone_grads[i] = Some(bg);
            upstream = Some(gin);
        }
        (
            upstream.expect("non-empty backbone"),
            DetectorGrads {
                backbone: backbone_grads.into_iter().map(|g| g.expect("filled")).collect(),
                heads: head_grads,
            },
        )
    }

    /// Fold per-sample normalization statistics into the running buffers.
    pub fn absorb_stats(&mut self, cache: &DetectorCache, momentum: f64) {
        for (block, bc) in self.backbone.iter_mut().zip(cache.blocks.iter()) {
            if let Some(stats) = ConvBlock::stats(bc) {
                block.absorb_stats(stats, momentum);
            }
        }
    }

    pub fn named_params(&self, prefix: &str) -> NamedViews<'_> {
        let mut v = Vec::new();
        for (i, b) in self.backbone.iter().enumerate() {
            v.extend(b.named_params(&qualify(prefix, &format!("backbone.block{i}"))));
        }
        for (i, h) in self.heads.iter().enumerate() {
            v.extend(h.loc.named_params(&qualify(prefix, &format!("head{i}.loc"))));
            v.extend(h.conf.named_params(&qualify(prefix, &format!("head{i}.conf"))));
        }
        v
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> NamedViewsMut<'_> {
        let mut v = Vec::new();
        for (i, b) in self.backbone.iter_mut().enumerate() {
            v.extend(b.named_params_mut(&qualify(prefix, &format!("backbone.block{i}"))));
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            v.extend(h.loc.named_params_mut(&qualify(prefix, &format!("head{i}.loc"))));
            v.extend(h.conf.named_params_mut(&qualify(prefix, &format!("head{i}.conf"))));
        }
        v
    }

    pub fn named_buffers(&self, prefix: &str) -> NamedViews<'_> {
        let mut v = Vec::new();
        for (i, b) in self.backbone.iter().enumerate() {
            v.extend(b.named_buffers(&qualify(prefix, &format!("backbone.block{i}"))));
        }
        v
    }

    pub fn named_buffers_mut(&mut self, prefix: &str) -> NamedViewsMut<'_> {
        let mut v = Vec::new();
        for (i, b) in self.backbone.iter_mut().enumerate() {
            v.extend(b.named_buffers_mut(&qualify(prefix, &format!("backbone.block{i}"))));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params("").iter().map(|(_, v)| v.len()).sum()
    }
}

impl DetectorGrads {
    /// Gradient views in the same order as [`Detector::named_params`].
    pub fn named_views(&self, prefix: &str) -> NamedViews<'_> {
        let mut v = Vec::new();
        for (i, g) in self.backbone.iter().enumerate() {
            v.extend(g.named_views(&qualify(prefix, &format!("backbone.block{i}"))));
        }
        for (i, (gl, gc)) in self.heads.iter().enumerate() {
            v.extend(gl.named_views(&qualify(prefix, &format!("head{i}.loc"))));
            v.extend(gc.named_views(&qualify(prefix, &format!("head{i}.conf"))));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_config_builds_and_matches_hand_computed_count() {
        let cfg = DetectorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let det = Detector::init(&mut rng, cfg.clone()).unwrap();
        assert_eq!(det.param_count(), cfg.param_count_closed_form());
        // Layer-by-layer by hand: backbone 360+1776+3528+7008+9312 = 21984;
        // each head 4624 (loc) + 6936 (conf) = 11560, two heads 23120.
        assert_eq!(det.param_count(), 45_104);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = DetectorConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let d1 = Detector::init(&mut r1, cfg.clone()).unwrap();
        let d2 = Detector::init(&mut r2, cfg).unwrap();
        let p1 = d1.named_params("");
        let p2 = d2.named_params("");
        assert_eq!(p1.len(), p2.len());
        for ((n1, v1), (n2, v2)) in p1.iter().zip(p2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn forward_shapes_follow_the_anchor_count() {
        let cfg = DetectorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let det = Detector::init(&mut rng, cfg).unwrap();
        use rand::Rng;
        let x = ndarray::Array3::from_shape_fn((3, 48, 48), |_| rng.gen_range(0.0..1.0));
        let (out, _) = det.forward(&x, Mode::Eval).unwrap();
        // 48 → 48/24/12/6/3; heads at strides 8 (6×6) and 16 (3×3), 4 per
        // cell → 144 + 36 = 180 anchors.
        assert_eq!(det.num_anchors(48, 48), 180);
        assert_eq!(out.loc.dim(), (180, 4));
        assert_eq!(out.conf.dim(), (180, 6));
        assert_eq!(det.anchors(48, 48).len(), 180);
        assert!(out.loc.iter().chain(out.conf.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_wrong_input_channels_and_bad_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let det = Detector::init(&mut rng, DetectorConfig::default()).unwrap();
        let x = ndarray::Array3::zeros((4, 48, 48));
        assert!(det.forward(&x, Mode::Eval).is_err());
        let bad = DetectorConfig {
            head_blocks: vec![9],
            ..DetectorConfig::default()
        };
        assert!(Detector::init(&mut rng, bad).is_err());
        let bad = DetectorConfig {
            num_classes: 0,
            ..DetectorConfig::default()
        };
        assert!(Detector::init(&mut rng, bad).is_err());
    }

    #[test]
    fn backward_matches_finite_differences_on_a_small_detector() {
        use rand::Rng;
        let cfg = DetectorConfig {
            in_channels: 2,
            num_classes: 2,
            channels: vec![4, 6],
            head_blocks: vec![1],
            anchors: AnchorSpec {
                scales: vec![2.0],
                ratios: vec![1.0],
            },
            with_norm: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let det = Detector::init(&mut rng, cfg).unwrap();
        let x = ndarray::Array3::from_shape_fn((2, 8, 8), |_| rng.gen_range(0.1..0.9));
        let (out, cache) = det.forward(&x, Mode::Train).unwrap();
        let wl = Array2::from_shape_fn(out.loc.dim(), |_| rng.gen_range(-1.0..1.0));
        let wc = Array2::from_shape_fn(out.conf.dim(), |_| rng.gen_range(-1.0..1.0));
        let loss = |d: &Detector, x: &Array3<f64>| {
            let (o, _) = d.forward(x, Mode::Train).unwrap();
            (&o.loc * &wl).sum() + (&o.conf * &wc).sum()
        };
        let (gx, grads) = det.backward(&cache, &wl, &wc);
        let step = 1e-5;
        let rel = |n: f64, a: f64| (n - a).abs() / (n.abs() + a.abs()).max(1e-4);
        // Input coordinate.
        let mut xp = x.clone();
        for idx in [(0usize, 3usize, 3usize), (1, 7, 0)] {
            let o = xp[idx];
            xp[idx] = o + step;
            let up = loss(&det, &xp);
            xp[idx] = o - step;
            let dn = loss(&det, &xp);
            xp[idx] = o;
            let num = (up - dn) / (2.0 * step);
            assert!(rel(num, gx[idx]) < 1e-4, "{num} vs {}", gx[idx]);
        }
        // One coordinate of every parameter tensor.
        let views = grads.named_views("");
        let names: Vec<String> = views.iter().map(|(n, _)| n.clone()).collect();
        for (name, gv) in names.iter().zip(views.iter().map(|(_, v)| v)) {
            let coord = rng.gen_range(0..gv.len());
            let ana = gv.iter().nth(coord).copied().unwrap();
            let probe = |delta: f64| {
                let mut dd = det.clone();
                {
                    let mut ps = dd.named_params_mut("");
                    let (_, pv) = ps.iter_mut().find(|(n, _)| n == name).unwrap();
                    *pv.iter_mut().nth(coord).unwrap() += delta;
                }
                loss(&dd, &x)
            };
            let num = (probe(step) - probe(-step)) / (2.0 * step);
            assert!(rel(num, ana) < 1e-4, "param {name}[{coord}]: {num} vs {ana}");
        }
    }
}
