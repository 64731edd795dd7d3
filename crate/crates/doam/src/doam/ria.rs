//! Region information aggregation and gated scale selection.
//!
//! `region_aggregate` replaces every value in a `k`×`k` tile with the tile
//! mean; tiles at the bottom/right borders are clipped to the image and
//! averaged over their actual size, so the image-wide mean is conserved for
//! every `k`. The operator is an orthogonal projector (idempotent and
//! self-adjoint), which makes its backward pass the same tile-averaging
//! applied to the incoming gradient.
//!
//! `gated_select` scores one aggregated candidate per scale with a shared
//! gate convolution, squashes the spatial mean of each score through a
//! sigmoid, and mixes the candidates with softmax weights — a convex
//! combination, so the output is bounded by the pointwise min/max of its
//! inputs.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::nn::conv::{Conv2d, Conv2dGrad};
use crate::nn::act::sigmoid_scalar;
use crate::parallel;

/// Tile-average `b` over `k`×`k` regions (clipped at the borders).
pub fn region_aggregate(b: &Array3<f64>, k: usize) -> Result<Array3<f64>> {
    let (c, h, w) = b.dim();
    if k == 0 || k > h || k > w {
        return Err(Error::InvalidArgument {
            op: "region_aggregate",
            reason: format!("tile size {k} outside 1..=min({h},{w})"),
        });
    }
    let planes = parallel::map_indexed(c, |ci| {
        let plane = b.index_axis(Axis(0), ci);
        let mut out = Array2::<f64>::zeros((h, w));
        let mut ty = 0;
        while ty < h {
            let y_end = (ty + k).min(h);
            let mut tx = 0;
            while tx < w {
                let x_end = (tx + k).min(w);
                let mut sum = 0.0;
                for y in ty..y_end {
                    for x in tx..x_end {
                        sum += plane[[y, x]];
                    }
                }
                let mean = sum / ((y_end - ty) * (x_end - tx)) as f64;
                for y in ty..y_end {
                    for x in tx..x_end {
                        out[[y, x]] = mean;
                    }
                }
                tx = x_end;
            }
            ty = y_end;
        }
        out
    });
    let mut out = Array3::zeros((c, h, w));
    for (ci, plane) in planes.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), ci).assign(&plane);
    }
    Ok(out)
}

/// Softmax over a small logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Mix candidate tensors with softmax weights over `logits`.
///
/// This is the final step of [`gated_select`], split out so the mixing rule
/// can be exercised with hand-set logits.
pub fn softmax_mixture(candidates: &[Array3<f64>], logits: &[f64]) -> Array3<f64> {
    assert_eq!(candidates.len(), logits.len());
    let weights = softmax(logits);
    let mut out = Array3::zeros(candidates[0].dim());
    for (cand, &w) in candidates.iter().zip(weights.iter()) {
        out.scaled_add(w, cand);
    }
    out
}

/// Everything needed to run [`gated_select_backward`].
#[derive(Debug, Clone)]
pub struct GatedSelectCache {
    /// Raw gate-conv output per candidate, shape (1, H, W).
    pub scores: Vec<Array3<f64>>,
    /// Spatial mean of each score map.
    pub means: Vec<f64>,
    /// Sigmoid-squashed gate logits.
    pub logits: Vec<f64>,
    /// Softmax mixture weights.
    pub weights: Vec<f64>,
}

/// Score each candidate with the shared gate conv and mix them.
pub fn gated_select(
    candidates: &[Array3<f64>],
    gate: &Conv2d,
) -> Result<(Array3<f64>, GatedSelectCache)> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument {
            op: "gated_select",
            reason: "no candidates".into(),
        });
    }
    let scores: Vec<Array3<f64>> = candidates.iter().map(|c| gate.forward(c)).collect();
    let means: Vec<f64> = scores
        .iter()
        .map(|s| s.sum() / s.len() as f64)
        .collect();
    let logits: Vec<f64> = means.iter().map(|&m| sigmoid_scalar(m)).collect();
    let weights = softmax(&logits);
    let mut out = Array3::zeros(candidates[0].dim());
    for (cand, &w) in candidates.iter().zip(weights.iter()) {
        out.scaled_add(w, cand);
    }
    let cache = GatedSelectCache {
        scores,
        means,
        logits,
        weights,
    };
    Ok((out, cache))
}

/// Gradients wrt each candidate plus the accumulated gate-conv gradient.
pub fn gated_select_backward(
    candidates: &[Array3<f64>],
    gate: &Conv2d,
    cache: &GatedSelectCache,
    grad_out: &Array3<f64>,
) -> (Vec<Array3<f64>>, Conv2dGrad) {
    let n = candidates.len();
    // d(loss)/d(weight_k) = <grad_out, candidate_k>.
    let dweights: Vec<f64> = candidates
        .iter()
        .map(|cand| (grad_out * cand).sum())
        .collect();
    // Softmax Jacobian: dlogit_j = w_j (dw_j − Σ_i w_i dw_i).
    let dot: f64 = cache
        .weights
        .iter()
        .zip(dweights.iter())
        .map(|(w, dw)| w * dw)
        .sum();
    let dlogits: Vec<f64> = cache
        .weights
        .iter()
        .zip(dweights.iter())
        .map(|(w, dw)| w * (dw - dot))
        .collect();
    let mut grads: Vec<Array3<f64>> = cache
        .weights
        .iter()
        .map(|&w| {
            let mut g = grad_out.clone();
            g *= w;
            g
        })
        .collect();
    let mut gate_grad = Conv2dGrad::zeros(gate);
    for i in 0..n {
        // Through sigmoid and the spatial mean back to the gate conv output.
        let dmean = dlogits[i] * cache.logits[i] * (1.0 - cache.logits[i]);
        let dscore =
            Array3::from_elem(cache.scores[i].dim(), dmean / cache.scores[i].len() as f64);
        let (dcand, g) = gate.backward(&candidates[i], &dscore);
        grads[i] += &dcand;
        gate_grad.accumulate(&g);
    }
    (grads, gate_grad)
}
