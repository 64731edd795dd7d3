//! Fixed-kernel Sobel edge extraction with reflect padding.
//!
//! Multichannel inputs are collapsed to luminance (equal-weight channel mean)
//! before filtering. The combined edge image is the stabilized gradient
//! magnitude `sqrt(h² + v² + ε) − sqrt(ε)`, which is exactly zero on constant
//! inputs and has a bounded derivative everywhere. Directional responses are
//! rescaled so a unit-range input yields edges in the unit range too: the
//! edge plane is concatenated with the image downstream, and mixing a [0, 5.7]
//! channel into [0, 1] features would let it dominate every first-layer
//! filter.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Stabilizer under the magnitude root.
pub const SOBEL_EPS: f64 = 1e-12;

/// Peak gradient magnitude a unit-range luminance plane can produce: each
/// directional kernel's positive taps sum to 4, so `sqrt(4² + 4²)` bounds the
/// combined response. Directional maps are divided by this before use.
pub const SOBEL_MAG_MAX: f64 = 5.656854249492381;

/// Horizontal-gradient kernel (responds to vertical intensity steps).
pub const SOBEL_H: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Vertical-gradient kernel (transpose of [`SOBEL_H`]).
pub const SOBEL_V: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Per-direction edge responses plus their combined magnitude, all H×W.
#[derive(Debug, Clone)]
pub struct EdgeImages {
    pub horizontal: Array2<f64>,
    pub vertical: Array2<f64>,
    pub combined: Array2<f64>,
}

/// Mirror an out-of-range index back into [0, n) without repeating the edge.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    debug_assert!(r >= 0 && r < n);
    r as usize
}

fn correlate_reflect(lum: &Array2<f64>, kernel: &[[f64; 3]; 3]) -> Array2<f64> {
    let (h, w) = lum.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // Positive and negative taps are summed separately and
            // subtracted once: on a constant plane both partial sums see the
            // identical sequence (each kernel half mirrors the other), so
            // they cancel exactly instead of leaving an order-dependent ulp.
            let mut pos = 0.0;
            let mut neg = 0.0;
            for (ky, row) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ky as isize - 1, h);
                for (kx, &kv) in row.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let sx = reflect(x as isize + kx as isize - 1, w);
                    if kv > 0.0 {
                        pos += kv * lum[[sy, sx]];
                    } else {
                        neg += -kv * lum[[sy, sx]];
                    }
                }
            }
            out[[y, x]] = pos - neg;
        }
    }
    out
}

/// Adjoint of [`correlate_reflect`]: scatter `grad` back through the taps.
fn correlate_reflect_adjoint(grad: &Array2<f64>, kernel: &[[f64; 3]; 3]) -> Array2<f64> {
    let (h, w) = grad.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let g = grad[[y, x]];
            if g == 0.0 {
                continue;
            }
            for (ky, row) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ky as isize - 1, h);
                for (kx, &kv) in row.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let sx = reflect(x as isize + kx as isize - 1, w);
                    out[[sy, sx]] += kv * g;
                }
            }
        }
    }
    out
}

pub fn luminance(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut lum = Array2::zeros((h, w));
    for ci in 0..c {
        lum += &x.index_axis(ndarray::Axis(0), ci);
    }
    lum /= c as f64;
    lum
}

/// Compute directional and combined edge images of an image tensor.
pub fn sobel_edges(x: &Array3<f64>) -> Result<EdgeImages> {
    let (c, h, w) = x.dim();
    if c < 1 {
        return Err(Error::InvalidArgument {
            op: "sobel_edges",
            reason: "zero-channel input".into(),
        });
    }
    if h < 3 || w < 3 {
        return Err(Error::ImageTooSmall { height: h, width: w });
    }
    let lum = luminance(x);
    let mut horizontal = correlate_reflect(&lum, &SOBEL_H);
    let mut vertical = correlate_reflect(&lum, &SOBEL_V);
    horizontal /= SOBEL_MAG_MAX;
    vertical /= SOBEL_MAG_MAX;
    let shift = SOBEL_EPS.sqrt();
    let mut combined = Array2::zeros((h, w));
    for ((cv, &hv), &vv) in combined
        .iter_mut()
        .zip(horizontal.iter())
        .zip(vertical.iter())
    {
        *cv = (hv * hv + vv * vv + SOBEL_EPS).sqrt() - shift;
    }
    Ok(EdgeImages {
        horizontal,
        vertical,
        combined,
    })
}

/// Gradient of a scalar loss wrt the input image, given the gradient wrt the
/// combined edge image.
pub fn sobel_backward(
    input_channels: usize,
    edges: &EdgeImages,
    grad_combined: &Array2<f64>,
) -> Array3<f64> {
    let (h, w) = grad_combined.dim();
    let mut gh = Array2::zeros((h, w));
    let mut gv = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let hv = edges.horizontal[[y, x]];
            let vv = edges.vertical[[y, x]];
            let r = (hv * hv + vv * vv + SOBEL_EPS).sqrt();
            let g = grad_combined[[y, x]];
            gh[[y, x]] = g * hv / r;
            gv[[y, x]] = g * vv / r;
        }
    }
    let glum = (correlate_reflect_adjoint(&gh, &SOBEL_H)
        + correlate_reflect_adjoint(&gv, &SOBEL_V))
        / SOBEL_MAG_MAX;
    let mut gx = Array3::zeros((input_channels, h, w));
    let scale = 1.0 / input_channels as f64;
    for ci in 0..input_channels {
        let mut plane = gx.index_axis_mut(ndarray::Axis(0), ci);
        plane.assign(&glum);
        plane *= scale;
    }
    gx
}
