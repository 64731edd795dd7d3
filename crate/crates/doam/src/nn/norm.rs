//! Per-channel spatial normalization with learnable scale/shift.
//!
//! Training mode normalizes each channel by statistics of the current sample
//! (so a forward pass stays a pure function of the input, which keeps
//! per-sample parallelism safe); running statistics are folded in afterwards
//! via [`SpatialNorm::absorb_stats`] and used frozen in eval mode.

use ndarray::{Array1, Array3};

use super::{qualify, NamedViews, NamedViewsMut, Mode};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SpatialNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// Per-channel statistics observed during one training forward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum NormCache {
    Train {
        /// Normalized activations before scale/shift.
        xhat: Array3<f64>,
        inv_std: Vec<f64>,
        stats: NormStats,
    },
    Eval,
}

#[derive(Debug, Clone)]
pub struct NormGrad {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl SpatialNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Array3<f64>, mode: Mode) -> (Array3<f64>, NormCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "norm channels");
        let n = (h * w) as f64;
        let mut y = Array3::zeros((c, h, w));
        match mode {
            Mode::Train => {
                let mut xhat = Array3::zeros((c, h, w));
                let mut stats = NormStats {
                    mean: vec![0.0; c],
                    var: vec![0.0; c],
                };
                let mut inv_std = vec![0.0; c];
                for ci in 0..c {
                    let plane = x.index_axis(ndarray::Axis(0), ci);
                    let mean = plane.sum() / n;
                    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let istd = 1.0 / (var + NORM_EPS).sqrt();
                    stats.mean[ci] = mean;
                    stats.var[ci] = var;
                    inv_std[ci] = istd;
                    let (g, b) = (self.gamma[ci], self.beta[ci]);
                    let mut xh = xhat.index_axis_mut(ndarray::Axis(0), ci);
                    let mut yo = y.index_axis_mut(ndarray::Axis(0), ci);
                    for ((xv, xh), yo) in plane.iter().zip(xh.iter_mut()).zip(yo.iter_mut()) {
                        let v = (xv - mean) * istd;
                        *xh = v;
                        *yo = g * v + b;
                    }
                }
                (y, NormCache::Train { xhat, inv_std, stats })
            }
            Mode::Eval => {
                for ci in 0..c {
                    let istd = 1.0 / (self.running_var[ci] + NORM_EPS).sqrt();
                    let (m, g, b) = (self.running_mean[ci], self.gamma[ci], self.beta[ci]);
                    let plane = x.index_axis(ndarray::Axis(0), ci);
                    let mut yo = y.index_axis_mut(ndarray::Axis(0), ci);
                    for (xv, yo) in plane.iter().zip(yo.iter_mut()) {
                        *yo = g * (xv - m) * istd + b;
                    }
                }
                (y, NormCache::Eval)
            }
        }
    }

    pub fn backward(&self, cache: &NormCache, grad_out: &Array3<f64>) -> (Array3<f64>, NormGrad) {
        let (c, h, w) = grad_out.dim();
        let n = (h * w) as f64;
        let mut gx = Array3::zeros((c, h, w));
        let mut ggamma = Array1::zeros(c);
        let mut gbeta = Array1::zeros(c);
        match cache {
            NormCache::Train { xhat, inv_std, .. } => {
                for ci in 0..c {
                    let go = grad_out.index_axis(ndarray::Axis(0), ci);
                    let xh = xhat.index_axis(ndarray::Axis(0), ci);
                    let sum_go = go.sum();
                    let sum_go_xh = go.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
                    ggamma[ci] = sum_go_xh;
                    gbeta[ci] = sum_go;
                    let scale = self.gamma[ci] * inv_std[ci];
                    let mean_go = sum_go / n;
                    let mean_go_xh = sum_go_xh / n;
                    let mut gxo = gx.index_axis_mut(ndarray::Axis(0), ci);
                    for ((g, xh), gxo) in go.iter().zip(xh.iter()).zip(gxo.iter_mut()) {
                        *gxo = scale * (g - mean_go - xh * mean_go_xh);
                    }
                }
            }
            NormCache::Eval => {
                // Frozen statistics: the transform is affine per channel.
                // Parameter gradients are only tracked in train mode.
                for ci in 0..c {
                    let istd = 1.0 / (self.running_var[ci] + NORM_EPS).sqrt();
                    let scale = self.gamma[ci] * istd;
                    let go = grad_out.index_axis(ndarray::Axis(0), ci);
                    let mut gxo = gx.index_axis_mut(ndarray::Axis(0), ci);
                    for (g, gxo) in go.iter().zip(gxo.iter_mut()) {
                        *gxo = scale * g;
                    }
                }
            }
        }
        (
            gx,
            NormGrad {
                gamma: ggamma,
                beta: gbeta,
            },
        )
    }

    /// Fold freshly observed statistics into the running estimates (EMA).
    /// Called once per processed sample, in deterministic order.
    pub fn absorb_stats(&mut self, stats: &NormStats, momentum: f64) {
        for ci in 0..self.channels() {
            self.running_mean[ci] =
                (1.0 - momentum) * self.running_mean[ci] + momentum * stats.mean[ci];
            self.running_var[ci] =
                (1.0 - momentum) * self.running_var[ci] + momentum * stats.var[ci];
        }
    }

    pub fn named_params(&self, prefix: &str) -> NamedViews<'_> {
        vec![
            (qualify(prefix, "gamma"), self.gamma.view().into_dyn()),
            (qualify(prefix, "beta"), self.beta.view().into_dyn()),
        ]
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> NamedViewsMut<'_> {
        vec![
            (qualify(prefix, "gamma"), self.gamma.view_mut().into_dyn()),
            (qualify(prefix, "beta"), self.beta.view_mut().into_dyn()),
        ]
    }

    pub fn named_buffers(&self, prefix: &str) -> NamedViews<'_> {
        vec![
            (
                qualify(prefix, "running_mean"),
                self.running_mean.view().into_dyn(),
            ),
            (
                qualify(prefix, "running_var"),
                self.running_var.view().into_dyn(),
            ),
        ]
    }

    pub fn named_buffers_mut(&mut self, prefix: &str) -> NamedViewsMut<'_> {
        vec![
            (
                qualify(prefix, "running_mean"),
                self.running_mean.view_mut().into_dyn(),
            ),
            (
                qualify(prefix, "running_var"),
                self.running_var.view_mut().into_dyn(),
            ),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

impl NormGrad {
    pub fn named_views(&self, prefix: &str) -> NamedViews<'_> {
        vec![
            (qualify(prefix, "gamma"), self.gamma.view().into_dyn()),
            (qualify(prefix, "beta"), self.beta.view().into_dyn()),
        ]
    }
}
