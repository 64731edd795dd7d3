//! Conv → norm → ReLU block, the unit both DOAM sub-modules and the detector
//! backbone are assembled from.

use ndarray::Array3;
use rand::Rng;

use super::act::{relu, relu_backward};
use super::conv::{Conv2d, Conv2dGrad};
use super::norm::{NormCache, NormGrad, NormStats, SpatialNorm};
use super::{init, Mode, NamedViews, NamedViewsMut};

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    /// `None` disables normalization (the block is then conv → ReLU).
    pub norm: Option<SpatialNorm>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    pub input: Array3<f64>,
    pub norm: Option<NormCache>,
    pub output: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockGrad {
    pub conv: Conv2dGrad,
    pub norm: Option<NormGrad>,
}

impl ConvBlock {
    pub fn init<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        stride: usize,
        with_norm: bool,
    ) -> Self {
        let conv = init::conv2d(rng, c_out, c_in, 3, stride, 1);
        let norm = with_norm.then(|| SpatialNorm::new(c_out));
        Self { conv, norm }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Array3<f64>, mode: Mode) -> (Array3<f64>, ConvBlockCache) {
        let z = self.conv.forward(x);
        let (post_norm, norm_cache) = match &self.norm {
            Some(n) => {
                let (y, c) = n.forward(&z, mode);
                (y, Some(c))
            }
            None => (z, None),
        };
        let y = relu(&post_norm);
        (
            y.clone(),
            ConvBlockCache {
                input: x.clone(),
                norm: norm_cache,
                output: y,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvBlockCache,
        grad_out: &Array3<f64>,
    ) -> (Array3<f64>, ConvBlockGrad) {
        let grad_post_norm = relu_backward(&cache.output, grad_out);
        let (grad_z, norm_grad) = match (&self.norm, &cache.norm) {
            (Some(n), Some(nc)) => {
                let (g, ng) = n.backward(nc, &grad_post_norm);
                (g, Some(ng))
            }
            _ => (grad_post_norm, None),
        };
        let (gx, conv_grad) = self.conv.backward(&cache.input, &grad_z);
        (
            gx,
            ConvBlockGrad {
                conv: conv_grad,
                norm: norm_grad,
            },
        )
    }

    /// Statistics observed by this block's norm layer during a training
    /// forward pass, if any.
    pub fn stats(cache: &ConvBlockCache) -> Option<&NormStats> {
        match &cache.norm {
            Some(NormCache::Train { stats, .. }) => Some(stats),
            _ => None,
        }
    }

    pub fn absorb_stats(&mut self, stats: &NormStats, momentum: f64) {
        if let Some(n) = &mut self.norm {
            n.absorb_stats(stats, momentum);
        }
    }

    pub fn named_params(&self, prefix: &str) -> NamedViews<'_> {
        let mut v = self.conv.named_params(prefix);
        if let Some(n) = &self.norm {
            v.extend(n.named_params(prefix));
        }
        v
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> NamedViewsMut<'_> {
        let mut v = self.conv.named_params_mut(prefix);
        if let Some(n) = &mut self.norm {
            v.extend(n.named_params_mut(prefix));
        }
        v
    }

    pub fn named_buffers(&self, prefix: &str) -> NamedViews<'_> {
        match &self.norm {
            Some(n) => n.named_buffers(prefix),
            None => vec![],
        }
    }

    pub fn named_buffers_mut(&mut self, prefix: &str) -> NamedViewsMut<'_> {
        match &mut self.norm {
            Some(n) => n.named_buffers_mut(prefix),
            None => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.as_ref().map_or(0, |n| n.param_count())
    }
}

impl ConvBlockGrad {
    pub fn named_views(&self, prefix: &str) -> NamedViews<'_> {
        let mut v = self.conv.named_views(prefix);
        if let Some(n) = &self.norm {
            v.extend(n.named_views(prefix));
        }
        v
    }
}
