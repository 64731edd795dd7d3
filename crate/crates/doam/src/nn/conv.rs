//! 2D convolution (cross-correlation) with zero padding and explicit backward.

use ndarray::{Array1, Array3, Array4};

use super::{qualify, NamedViews, NamedViewsMut};
use crate::parallel;

/// A plain 2D convolution layer over (C, H, W) maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (c_out, c_in, k, k)
    pub weight: Array4<f64>,
    /// (c_out)
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Parameter gradients mirroring [`Conv2d`].
#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

pub fn conv_out_dim(in_dim: usize, k: usize, stride: usize, padding: usize) -> usize {
    (in_dim + 2 * padding - k) / stride + 1
}

/// Half-open output range [lo, hi) for which `o*stride + tap - padding` lands
/// inside [0, in_dim).
#[inline]
fn valid_range(out_dim: usize, in_dim: usize, stride: usize, padding: usize, tap: usize) -> (usize, usize) {
    let lo = if tap >= padding {
        0
    } else {
        (padding - tap).div_ceil(stride)
    };
    let hi_raw = in_dim + padding;
    if hi_raw <= tap {
        return (0, 0);
    }
    let hi = ((hi_raw - tap - 1) / stride + 1).min(out_dim);
    (lo, hi.max(lo))
}

impl Conv2d {
    pub fn new(weight: Array4<f64>, bias: Array1<f64>, stride: usize, padding: usize) -> Self {
        assert_eq!(weight.shape()[0], bias.len());
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        assert_eq!(c_in, self.in_channels(), "conv2d input channels");
        let k = self.kernel();
        let (s, p) = (self.stride, self.padding);
        let (h_out, w_out) = (conv_out_dim(h, k, s, p), conv_out_dim(w, k, s, p));
        let mut out = Array3::<f64>::zeros((self.out_channels(), h_out, w_out));

        let xs = x.as_slice().expect("contiguous input");
        let ws = self.weight.as_slice().expect("contiguous weight");
        let out_plane = h_out * w_out;
        let slab = c_in * k * k;

        parallel::for_each_chunk_mut(out.as_slice_mut().unwrap(), out_plane, |co, plane| {
            plane.fill(self.bias[co]);
            for ci in 0..c_in {
                let xplane = &xs[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h_out, h, s, p, ky);
                    for kx in 0..k {
                        let wgt = ws[co * slab + ci * k * k + ky * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(w_out, w, s, p, kx);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let orow = &mut plane[oy * w_out..(oy + 1) * w_out];
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let ix0 = ox_lo + kx - p;
                                let n = ox_hi - ox_lo;
                                for (o, xv) in orow[ox_lo..ox_lo + n].iter_mut().zip(&xrow[ix0..ix0 + n]) {
                                    *o += wgt * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] += wgt * xrow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// Backward pass; returns (grad wrt input, parameter gradients).
    pub fn backward(&self, x: &Array3<f64>, grad_out: &Array3<f64>) -> (Array3<f64>, Conv2dGrad) {
        let (c_in, h, w) = x.dim();
        let c_out = self.out_channels();
        let k = self.kernel();
        let (s, p) = (self.stride, self.padding);
        let (_, h_out, w_out) = grad_out.dim();
        debug_assert_eq!(grad_out.dim().0, c_out);

        let xs = x.as_slice().unwrap();
        let gos = grad_out.as_slice().unwrap();
        let ws = self.weight.as_slice().unwrap();
        let slab = c_in * k * k;

        // Weight and bias gradients, one task per output channel.
        let mut gw = Array4::<f64>::zeros(self.weight.raw_dim());
        let mut gb = Array1::<f64>::zeros(c_out);
        {
            let gw_slice = gw.as_slice_mut().unwrap();
            let per_co: Vec<(Vec<f64>, f64)> = parallel::map_indexed(c_out, |co| {
                let goplane = &gos[co * h_out * w_out..(co + 1) * h_out * w_out];
                let mut wgrad = vec![0.0; slab];
                for ci in 0..c_in {
                    let xplane = &xs[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        let (oy_lo, oy_hi) = valid_range(h_out, h, s, p, ky);
                        for kx in 0..k {
                            let (ox_lo, ox_hi) = valid_range(w_out, w, s, p, kx);
                            if ox_hi <= ox_lo {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let gorow = &goplane[oy * w_out..(oy + 1) * w_out];
                                let xrow = &xplane[iy * w..(iy + 1) * w];
                                if s == 1 {
                                    let ix0 = ox_lo + kx - p;
                                    let n = ox_hi - ox_lo;
                                    for (g, xv) in gorow[ox_lo..ox_lo + n].iter().zip(&xrow[ix0..ix0 + n]) {
                                        acc += g * xv;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        acc += gorow[ox] * xrow[ox * s + kx - p];
                                    }
                                }
                            }
                            wgrad[ci * k * k + ky * k + kx] = acc;
                        }
                    }
                }
                (wgrad, goplane.iter().sum::<f64>())
            });
            for (co, (wgrad, bgrad)) in per_co.into_iter().enumerate() {
                gw_slice[co * slab..(co + 1) * slab].copy_from_slice(&wgrad);
                gb[co] = bgrad;
            }
        }

        // Input gradient, one task per input channel.
        let mut gx = Array3::<f64>::zeros((c_in, h, w));
        parallel::for_each_chunk_mut(gx.as_slice_mut().unwrap(), h * w, |ci, gplane| {
            for co in 0..c_out {
                let goplane = &gos[co * h_out * w_out..(co + 1) * h_out * w_out];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_range(h_out, h, s, p, ky);
                    for kx in 0..k {
                        let wgt = ws[co * slab + ci * k * k + ky * k + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(w_out, w, s, p, kx);
                        if ox_hi <= ox_lo {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let gorow = &goplane[oy * w_out..(oy + 1) * w_out];
                            let grow = &mut gplane[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let ix0 = ox_lo + kx - p;
                                let n = ox_hi - ox_lo;
                                for (g, go) in grow[ix0..ix0 + n].iter_mut().zip(&gorow[ox_lo..ox_lo + n]) {
                                    *g += wgt * go;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    grow[ox * s + kx - p] += wgt * gorow[ox];
                                }
                            }
                        }
                    }
                }
            }
        });

        (gx, Conv2dGrad { weight: gw, bias: gb })
    }

    pub fn named_params(&self, prefix: &str) -> NamedViews<'_> {
        vec![
            (qualify(prefix, "weight"), self.weight.view().into_dyn()),
            (qualify(prefix, "bias"), self.bias.view().into_dyn()),
        ]
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> NamedViewsMut<'_> {
        vec![
            (qualify(prefix, "weight"), self.weight.view_mut().into_dyn()),
            (qualify(prefix, "bias"), self.bias.view_mut().into_dyn()),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

impl Conv2dGrad {
    /// Zero gradient with the same shapes as `conv`'s parameters.
    pub fn zeros(conv: &Conv2d) -> Self {
        Self {
            weight: Array4::zeros(conv.weight.dim()),
            bias: Array1::zeros(conv.bias.dim()),
        }
    }

    /// Elementwise add of another gradient (shared-parameter accumulation).
    pub fn accumulate(&mut self, other: &Conv2dGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn named_views(&self, prefix: &str) -> NamedViews<'_> {
        vec![
            (qualify(prefix, "weight"), self.weight.view().into_dyn()),
            (qualify(prefix, "bias"), self.bias.view().into_dyn()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn brute_conv(x: &Array3<f64>, c: &Conv2d) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        let k = c.kernel();
        let (s, p) = (c.stride, c.padding);
        let (ho, wo) = (conv_out_dim(h, k, s, p), conv_out_dim(w, k, s, p));
        let mut out = Array3::zeros((c.out_channels(), ho, wo));
        for co in 0..c.out_channels() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = c.bias[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += c.weight[[co, ci, ky, kx]] * x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    out[[co, oy, ox]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut w = Array4::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        let conv = Conv2d::new(w, array![0.0], 1, 1);
        let x = Array3::from_shape_fn((1, 5, 4), |(_, y, xc)| (y * 4 + xc) as f64 * 0.1);
        let y = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn matches_brute_force_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(c_in, c_out, k, s, p, h, w) in
            &[(2, 3, 3, 1, 1, 7, 6), (3, 2, 3, 2, 1, 8, 8), (1, 4, 1, 1, 0, 5, 5)]
        {
            let weight = Array4::from_shape_fn((c_out, c_in, k, k), |_| rng.gen_range(-1.0..1.0));
            let bias = Array1::from_shape_fn(c_out, |_| rng.gen_range(-0.5..0.5));
            let conv = Conv2d::new(weight, bias, s, p);
            let x = Array3::from_shape_fn((c_in, h, w), |_| rng.gen_range(-1.0..1.0));
            let fast = conv.forward(&x);
            let slow = brute_conv(&x, &conv);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::new(
            Array4::from_shape_fn((2, 2, 3, 3), |_| rng.gen_range(-0.6..0.6)),
            Array1::from_shape_fn(2, |_| rng.gen_range(-0.2..0.2)),
            2,
            1,
        );
        let x = Array3::from_shape_fn((2, 6, 5), |_| rng.gen_range(-1.0..1.0));
        let y = conv.forward(&x);
        // Loss = sum of outputs weighted by a fixed random map.
        let wmap = Array3::from_shape_fn(y.raw_dim(), |_| rng.gen_range(-1.0..1.0));
        let (gx, gp) = conv.backward(&x, &wmap);

        let eps = 1e-6;
        let loss = |c: &Conv2d, x: &Array3<f64>| (c.forward(x) * &wmap).sum();
        // input grad
        let mut xp = x.clone();
        for idx in [(0usize, 1usize, 2usize), (1, 5, 0), (0, 0, 4)] {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let up = loss(&conv, &xp);
            xp[idx] = orig - eps;
            let dn = loss(&conv, &xp);
            xp[idx] = orig;
            let num = (up - dn) / (2.0 * eps);
            assert!((num - gx[idx]).abs() < 1e-6, "{num} vs {}", gx[idx]);
        }
        // weight grad
        let mut cp = conv.clone();
        for idx in [(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let orig = cp.weight[idx];
            cp.weight[idx] = orig + eps;
            let up = loss(&cp, &x);
            cp.weight[idx] = orig - eps;
            let dn = loss(&cp, &x);
            cp.weight[idx] = orig;
            let num = (up - dn) / (2.0 * eps);
            assert!((num - gp.weight[idx]).abs() < 1e-6);
        }
        // bias grad
        let mut cp = conv.clone();
        let orig = cp.bias[1];
        cp.bias[1] = orig + eps;
        let up = loss(&cp, &x);
        cp.bias[1] = orig - eps;
        let dn = loss(&cp, &x);
        cp.bias[1] = orig;
        assert!(((up - dn) / (2.0 * eps) - gp.bias[1]).abs() < 1e-6);
    }
}
