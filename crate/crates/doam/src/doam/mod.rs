//! De-occlusion attention: edge guidance, material awareness, and the
//! attention map that refines detector input.
//!
//! The module wires four stages around an input image `x` (C×H×W):
//!
//! 1. **Edge extraction** — Sobel magnitude `E` of the luminance
//!    ([`sobel::sobel_edges`]).
//! 2. **Edge guidance** — `N1` conv blocks over `E` produce edge features
//!    `A` (C_e channels).
//! 3. **Material awareness** — `N2` conv blocks over `P = concat(x, E)`
//!    produce `B1` (C_r channels); each region scale `k` yields a candidate
//!    `concat(B1, region_aggregate(B1, k))`, and a shared gate conv picks a
//!    softmax mixture `B` of the candidates ([`ria::gated_select`]).
//! 4. **Attention generation** — a 1×1 conv fuses `concat(A, B)` into one
//!    plane, a sigmoid maps it into (0, 1), and the resulting attention map
//!    `M` rescales every channel of `P`: `D[c] = M ⊙ P[c]`.
//!
//! The output therefore has `C + 1` channels (the image plus its edge
//! plane), spatially aligned with the input. `backward` propagates exact
//! gradients through every path of this graph, including the Sobel filter
//! and the gate.

pub mod ria;
pub mod sobel;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::block::{ConvBlock, ConvBlockCache, ConvBlockGrad};
use crate::nn::conv::{Conv2d, Conv2dGrad};
use crate::nn::{init, qualify, Mode, NamedViews, NamedViewsMut};
pub use ria::{
    gated_select, gated_select_backward, region_aggregate, softmax, softmax_mixture,
    GatedSelectCache,
};
pub use sobel::{sobel_backward, sobel_edges, EdgeImages, SOBEL_EPS};

/// Validated network input: (C, H, W) raster with finite values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array3<f64>);

impl ImageTensor {
    /// Validate shape (C ≥ 1, H and W ≥ 3 for the Sobel support) and value
    /// range.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c < 1 {
            return Err(Error::InvalidArgument {
                op: "ImageTensor::new",
                reason: "zero channels".into(),
            });
        }
        if h < 3 || w < 3 {
            return Err(Error::ImageTooSmall { height: h, width: w });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument {
                op: "ImageTensor::new",
                reason: format!("value {bad} outside the finite [0,1] range"),
            });
        }
        Ok(Self(data))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }
}

/// Concatenate the image with its combined edge plane: `P = concat(x, E)`.
pub fn concat_edge(x: &Array3<f64>, edge_combined: &Array2<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut p = Array3::zeros((c + 1, h, w));
    p.slice_mut(ndarray::s![..c, .., ..]).assign(x);
    p.index_axis_mut(Axis(0), c).assign(edge_combined);
    p
}

/// Rescale every channel of `P = concat(x, E)` by the attention map:
/// `D[c] = M ⊙ P[c]`.
pub fn apply_attention(
    attention: &Array2<f64>,
    x: &Array3<f64>,
    edge_combined: &Array2<f64>,
) -> Array3<f64> {
    let mut d = concat_edge(x, edge_combined);
    for mut plane in d.axis_iter_mut(Axis(0)) {
        plane *= attention;
    }
    d
}

/// Hyper-parameters of the de-occlusion attention module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoamConfig {
    /// Channels of the incoming image tensor.
    pub input_channels: usize,
    /// Number of conv blocks in the edge-guidance branch (N1).
    pub edge_blocks: usize,
    /// Number of conv blocks in the material-awareness branch (N2).
    pub material_blocks: usize,
    /// Feature width of the edge-guidance branch (C_e).
    pub edge_channels: usize,
    /// Feature width of the material-awareness branch (C_r).
    pub material_channels: usize,
    /// Region tile sizes, strictly increasing (K).
    pub region_scales: Vec<usize>,
    /// Attach a normalization layer to every conv block.
    pub with_norm: bool,
}

impl Default for DoamConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            edge_blocks: 2,
            material_blocks: 2,
            edge_channels: 16,
            material_channels: 16,
            region_scales: vec![5, 10, 15],
            with_norm: true,
        }
    }
}

impl DoamConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidArgument {
                op: "DoamConfig::validate",
                reason,
            })
        };
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        if self.edge_blocks == 0 || self.material_blocks == 0 {
            return fail("edge_blocks and material_blocks must be positive".into());
        }
        if self.edge_channels == 0 || self.material_channels == 0 {
            return fail("edge_channels and material_channels must be positive".into());
        }
        if self.region_scales.is_empty() {
            return fail("region_scales must not be empty".into());
        }
        if self.region_scales[0] == 0 {
            return fail("region_scales must be positive".into());
        }
        if !self.region_scales.windows(2).all(|w| w[0] < w[1]) {
            return fail(format!(
                "region_scales must be strictly increasing, got {:?}",
                self.region_scales
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count: per-block conv weights and biases, the
    /// optional per-channel affine pairs, the shared gate conv, and the 1×1
    /// fusion conv.
    pub fn param_count_closed_form(&self) -> usize {
        let (ce, cr) = (self.edge_channels, self.material_channels);
        let norm = |c: usize| if self.with_norm { 2 * c } else { 0 };
        let conv = |c_in: usize, c_out: usize, k: usize| k * k * c_in * c_out + c_out;
        let mut total = 0;
        for i in 0..self.edge_blocks {
            let c_in = if i == 0 { 1 } else { ce };
            total += conv(c_in, ce, 3) + norm(ce);
        }
        for i in 0..self.material_blocks {
            let c_in = if i == 0 { self.input_channels + 1 } else { cr };
            total += conv(c_in, cr, 3) + norm(cr);
        }
        total += conv(2 * cr, 1, 3); // gate
        total += conv(self.edge_channels + 2 * cr, 1, 1); // fuse
        total
    }
}

/// De-occlusion attention module with owned parameters.
#[derive(Debug, Clone)]
pub struct DoamModule {
    pub config: DoamConfig,
    /// Edge-guidance blocks (`eg.block{i}`).
    pub eg: Vec<ConvBlock>,
    /// Material-awareness blocks (`ma.block{i}`).
    pub ma: Vec<ConvBlock>,
    /// Shared gate conv scoring each region candidate (`ma.gate`).
    pub gate: Conv2d,
    /// 1×1 fusion conv producing the pre-sigmoid attention plane (`ag.fuse`).
    pub fuse: Conv2d,
}

/// Intermediate values captured by [`DoamModule::forward`].
#[derive(Debug, Clone)]
pub struct DoamCache {
    pub edges: EdgeImages,
    /// Concatenated input `concat(x, E)`, shape (C+1, H, W).
    pub p: Array3<f64>,
    pub eg: Vec<ConvBlockCache>,
    pub ma: Vec<ConvBlockCache>,
    /// Region candidates `concat(B1, B2^k)` per scale.
    pub candidates: Vec<Array3<f64>>,
    pub gate: GatedSelectCache,
    /// Fusion input `concat(A, B)`.
    pub ab: Array3<f64>,
    /// Sigmoid attention map, shape (H, W), every value in (0, 1).
    pub attention: Array2<f64>,
}

/// Parameter gradients mirroring [`DoamModule`]'s structure.
#[derive(Debug, Clone)]
pub struct DoamGrads {
    pub eg: Vec<ConvBlockGrad>,
    pub ma: Vec<ConvBlockGrad>,
    pub gate: Conv2dGrad,
    pub fuse: Conv2dGrad,
}

impl DoamModule {
    pub fn init<R: Rng>(rng: &mut R, config: DoamConfig) -> Result<Self> {
        config.validate()?;
        let (ce, cr) = (config.edge_channels, config.material_channels);
        let eg = (0..config.edge_blocks)
            .map(|i| {
                let c_in = if i == 0 { 1 } else { ce };
                ConvBlock::init(rng, c_in, ce, 1, config.with_norm)
            })
            .collect();
        let ma = (0..config.material_blocks)
            .map(|i| {
                let c_in = if i == 0 { config.input_channels + 1 } else { cr };
                ConvBlock::init(rng, c_in, cr, 1, config.with_norm)
            })
            .collect();
        let gate = init::conv2d(rng, 1, 2 * cr, 3, 1, 1);
        let mut fuse = init::conv2d(rng, 1, ce + 2 * cr, 1, 1, 0);
        // Start the attention near-identity (sigmoid(3) ≈ 0.95): a fresh
        // module should pass features through and learn where to suppress,
        // not throttle the whole downstream model to half scale.
        fuse.bias.fill(3.0);
        Ok(Self {
            config,
            eg,
            ma,
            gate,
            fuse,
        })
    }

    /// Number of channels in the refined output (input channels + edge plane).
    pub fn out_channels(&self) -> usize {
        self.config.input_channels + 1
    }

    /// Run the module, returning the refined map `D` and the forward cache.
    pub fn forward(&self, x: &Array3<f64>, mode: Mode) -> Result<(Array3<f64>, DoamCache)> {
        let (c, h, w) = x.dim();
        if c != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                op: "DoamModule::forward",
                expected: format!("{} channels", self.config.input_channels),
                got: format!("{c} channels"),
            });
        }
        let max_scale = *self.config.region_scales.last().expect("validated non-empty");
        if max_scale > h.min(w) {
            return Err(Error::InvalidArgument {
                op: "DoamModule::forward",
                reason: format!("region scale {max_scale} exceeds min image side {}", h.min(w)),
            });
        }
        let edges = sobel_edges(x)?;

        // Edge guidance over the combined edge plane.
        let mut a = edges
            .combined
            .clone()
            .into_shape_with_order((1, h, w))
            .expect("edge plane reshape");
        let mut eg_caches = Vec::with_capacity(self.eg.len());
        for block in &self.eg {
            let (next, cache) = block.forward(&a, mode);
            eg_caches.push(cache);
            a = next;
        }

        // Material awareness over concat(x, E).
        let p = concat_edge(x, &edges.combined);
        let mut b1 = p.clone();
        let mut ma_caches = Vec::with_capacity(self.ma.len());
        for block in &self.ma {
            let (next, cache) = block.forward(&b1, mode);
            ma_caches.push(cache);
            b1 = next;
        }

        // One candidate per region scale: local features next to their
        // tile-averaged context.
        let cr = self.config.material_channels;
        let candidates: Vec<Array3<f64>> = self
            .config
            .region_scales
            .iter()
            .map(|&k| {
                let b2 = region_aggregate(&b1, k)?;
                let mut cand = Array3::zeros((2 * cr, h, w));
                cand.slice_mut(ndarray::s![..cr, .., ..]).assign(&b1);
                cand.slice_mut(ndarray::s![cr.., .., ..]).assign(&b2);
                Ok(cand)
            })
            .collect::<Result<_>>()?;
        let (b, gate_cache) = gated_select(&candidates, &self.gate)?;

        // Fuse edge and material features into the attention map.
        let ce = self.config.edge_channels;
        let mut ab = Array3::zeros((ce + 2 * cr, h, w));
        ab.slice_mut(ndarray::s![..ce, .., ..]).assign(&a);
        ab.slice_mut(ndarray::s![ce.., .., ..]).assign(&b);
        let pre = self.fuse.forward(&ab);
        let attention = pre
            .index_axis(Axis(0), 0)
            .mapv(crate::nn::act::sigmoid_scalar);

        let d = apply_attention(&attention, x, &edges.combined);
        Ok((
            d,
            DoamCache {
                edges,
                p,
                eg: eg_caches,
                ma: ma_caches,
                candidates,
                gate: gate_cache,
                ab,
                attention,
            },
        ))
    }

    /// Edge-guidance branch alone: `N1` conv blocks over the combined edge
    /// plane, producing `A` (C_e, H, W).
    pub fn edge_guidance(&self, edges: &EdgeImages, mode: Mode) -> Array3<f64> {
        let (h, w) = edges.combined.dim();
        let mut a = edges
            .combined
            .clone()
            .into_shape_with_order((1, h, w))
            .expect("edge plane reshape");
        for block in &self.eg {
            a = block.forward(&a, mode).0;
        }
        a
    }

    /// Material-awareness branch alone: blocks over `P = concat(x, E)`, one
    /// region candidate per scale, gated mixture `B` (2·C_r, H, W).
    pub fn material_awareness(
        &self,
        x: &Array3<f64>,
        edges: &EdgeImages,
        mode: Mode,
    ) -> Result<Array3<f64>> {
        let (_, h, w) = x.dim();
        let mut b1 = concat_edge(x, &edges.combined);
        for block in &self.ma {
            b1 = block.forward(&b1, mode).0;
        }
        let cr = self.config.material_channels;
        let candidates: Vec<Array3<f64>> = self
            .config
            .region_scales
            .iter()
            .map(|&k| {
                let b2 = region_aggregate(&b1, k)?;
                let mut cand = Array3::zeros((2 * cr, h, w));
                cand.slice_mut(ndarray::s![..cr, .., ..]).assign(&b1);
                cand.slice_mut(ndarray::s![cr.., .., ..]).assign(&b2);
                Ok(cand)
            })
            .collect::<Result<_>>()?;
        Ok(gated_select(&candidates, &self.gate)?.0)
    }

    /// Attention generation alone: 1×1 fusion of `concat(A, B)` followed by
    /// a sigmoid, producing the (H, W) attention map.
    pub fn attention_generate(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<Array2<f64>> {
        let (ca, h, w) = a.dim();
        let (cb, hb, wb) = b.dim();
        if (h, w) != (hb, wb) || ca + cb != self.fuse.in_channels() {
            return Err(Error::ShapeMismatch {
                op: "DoamModule::attention_generate",
                expected: format!("aligned maps totalling {} channels", self.fuse.in_channels()),
                got: format!("({ca},{h},{w}) and ({cb},{hb},{wb})"),
            });
        }
        let mut ab = Array3::zeros((ca + cb, h, w));
        ab.slice_mut(ndarray::s![..ca, .., ..]).assign(a);
        ab.slice_mut(ndarray::s![ca.., .., ..]).assign(b);
        let pre = self.fuse.forward(&ab);
        Ok(pre
            .index_axis(Axis(0), 0)
            .mapv(crate::nn::act::sigmoid_scalar))
    }

    /// Gradient wrt the input image plus parameter gradients, given the
    /// gradient wrt the refined map `D`.
    pub fn backward(&self, cache: &DoamCache, grad_d: &Array3<f64>) -> (Array3<f64>, DoamGrads) {
        let c = self.config.input_channels;
        let (_, h, w) = cache.p.dim();
        let (ce, cr) = (self.config.edge_channels, self.config.material_channels);

        // D = M ⊙ P: split the incoming gradient between M and P.
        let mut grad_m = Array2::<f64>::zeros((h, w));
        for (gplane, pplane) in grad_d.axis_iter(Axis(0)).zip(cache.p.axis_iter(Axis(0))) {
            grad_m += &(&gplane * &pplane);
        }
        let mut grad_p = grad_d.clone();
        for mut plane in grad_p.axis_iter_mut(Axis(0)) {
            plane *= &cache.attention;
        }

        // Sigmoid, then the 1×1 fusion conv.
        let grad_pre = (&grad_m * &cache.attention * &(1.0 - &cache.attention))
            .into_shape_with_order((1, h, w))
            .expect("attention plane reshape");
        let (grad_ab, fuse_grad) = self.fuse.backward(&cache.ab, &grad_pre);
        let grad_a = grad_ab.slice(ndarray::s![..ce, .., ..]).to_owned();
        let grad_b = grad_ab.slice(ndarray::s![ce.., .., ..]).to_owned();

        // Gated selection back to each candidate, then candidates back to B1.
        // The tile-average operator is self-adjoint, so its backward pass is
        // the operator itself applied to the gradient.
        let (grad_cands, gate_grad) =
            gated_select_backward(&cache.candidates, &self.gate, &cache.gate, &grad_b);
        let mut grad_b1 = Array3::<f64>::zeros((cr, h, w));
        for (gc, &k) in grad_cands.iter().zip(self.config.region_scales.iter()) {
            grad_b1 += &gc.slice(ndarray::s![..cr, .., ..]);
            let via_tiles = region_aggregate(&gc.slice(ndarray::s![cr.., .., ..]).to_owned(), k)
                .expect("scale validated in forward");
            grad_b1 += &via_tiles;
        }

        // Material-awareness chain back to P.
        let mut ma_grads = vec![None; self.ma.len()];
        let mut g = grad_b1;
        for (i, block) in self.ma.iter().enumerate().rev() {
            let (gin, bg) = block.backward(&cache.ma[i], &g);
            ma_grads[i] = Some(bg);
            g = gin;
        }
        grad_p += &g;

        // Edge-guidance chain back to the edge plane.
        let mut eg_grads = vec![None; self.eg.len()];
        let mut g = grad_a;
        for (i, block) in self.eg.iter().enumerate().rev() {
            let (gin, bg) = block.backward(&cache.eg[i], &g);
            eg_grads[i] = Some(bg);
            g = gin;
        }

        // The edge plane feeds both branches: guidance output plus the last
        // channel of P.
        let grad_e = &g.index_axis(Axis(0), 0) + &grad_p.index_axis(Axis(0), c);
        let mut grad_x = grad_p.slice(ndarray::s![..c, .., ..]).to_owned();
        grad_x += &sobel_backward(c, &cache.edges, &grad_e);

        (
            grad_x,
            DoamGrads {
                eg: eg_grads.into_iter().map(|g| g.expect("filled")).collect(),
                ma: ma_grads.into_iter().map(|g| g.expect("filled")).collect(),
                gate: gate_grad,
                fuse: fuse_grad,
            },
        )
    }

    /// Fold the per-sample normalization statistics of a forward pass into
    /// the running buffers.
    pub fn absorb_stats(&mut self, cache: &DoamCache, momentum: f64) {
        for (block, bc) in self.eg.iter_mut().zip(cache.eg.iter()) {
            if let Some(stats) = ConvBlock::stats(bc) {
                block.absorb_stats(stats, momentum);
            }
        }
        for (block, bc) in self.ma.iter_mut().zip(cache.ma.iter()) {
            if let Some(stats) = ConvBlock::stats(bc) {
                block.absorb_stats(stats, momentum);
            }
        }
    }

    pub fn named_params(&self, prefix: &str) -> NamedViews<'_> {
        let mut v = Vec::new();
        for (i, b) in self.eg.iter().enumerate() {
            v.extend(b.named_params(&qualify(prefix, &format!("eg.block{i}"))));
        }
        for (i, b) in self.ma.iter().enumerate() {
            v.extend(b.named_params(&qualify(prefix, &format!("ma.block{i}"))));
        }
        v.extend(self.gate.named_params(&qualify(prefix, "ma.gate")));
        v.extend(self.fuse.named_params(&qualify(prefix, "ag.fuse")));
        v
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> NamedViewsMut<'_> {
        let mut v = Vec::new();
        for (i, b) in self.eg.iter_mut().enumerate() {
            v.extend(b.named_params_mut(&qualify(prefix, &format!("eg.block{i}"))));
        }
        for (i, b) in self.ma.iter_mut().enumerate() {
            v.extend(b.named_params_mut(&qualify(prefix, &format!("ma.block{i}"))));
        }
        v.extend(self.gate.named_params_mut(&qualify(prefix, "ma.gate")));
        v.extend(self.fuse.named_params_mut(&qualify(prefix, "ag.fuse")));
        v
    }

    pub fn named_buffers(&self, prefix: &str) -> NamedViews<'_> {
        let mut v = Vec::new();
        for (i, b) in self.eg.iter().enumerate() {
            v.extend(b.named_buffers(&qualify(prefix, &format!("eg.block{i}"))));
        }
        for (i, b) in self.ma.iter().enumerate() {
            v.extend(b.named_buffers(&qualify(prefix, &format!("ma.block{i}"))));
        }
        v
    }

    pub fn named_buffers_mut(&mut self, prefix: &str) -> NamedViewsMut<'_> {
        let mut v = Vec::new();
        for (i, b) in self.eg.iter_mut().enumerate() {
            v.extend(b.named_buffers_mut(&qualify(prefix, &format!("eg.block{i}"))));
        }
        for (i, b) in self.ma.iter_mut().enumerate() {
            v.extend(b.named_buffers_mut(&qualify(prefix, &format!("ma.block{i}"))));
        }
        v
    }

    /// Exact parameter count by enumeration.
    pub fn param_count(&self) -> usize {
        self.named_params("").iter().map(|(_, v)| v.len()).sum()
    }
}

impl DoamGrads {
    /// Gradient views in the same order as [`DoamModule::named_params`].
    pub fn named_views(&self, prefix: &str) -> NamedViews<'_> {
        let mut v = Vec::new();
        for (i, g) in self.eg.iter().enumerate() {
            v.extend(g.named_views(&qualify(prefix, &format!("eg.block{i}"))));
        }
        for (i, g) in self.ma.iter().enumerate() {
            v.extend(g.named_views(&qualify(prefix, &format!("ma.block{i}"))));
        }
        v.extend(self.gate.named_views(&qualify(prefix, "ma.gate")));
        v.extend(self.fuse.named_views(&qualify(prefix, "ag.fuse")));
        v
    }
}
