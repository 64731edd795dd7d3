//! Matching, localization and classification losses, with gradients.
//!
//! Anchors are matched to targets at IoU ≥ 0.5, and every target's single
//! best anchor is forced positive so no target goes unmatched. Localization
//! is smooth-L1 over the positive anchors' encoded residuals; classification
//! is softmax cross-entropy over positives plus the hardest negatives at a
//! 3:1 ratio (or a focal term over all anchors when selected). Both loss
//! terms are normalized by the positive count, and an image without targets
//! contributes a pure-background classification term only.

use ndarray::Array2;

use crate::detector::anchors::Anchor;
use crate::detector::boxes::encode;
use crate::detector::model::DetectorOutput;
use crate::error::{Error, Result};
use crate::geom::{iou, Box2D};

/// Matching threshold for positives.
pub const MATCH_IOU: f64 = 0.5;
/// Mined negatives per positive.
pub const NEG_POS_RATIO: usize = 3;

/// One target: foreground category index and a normalized corner box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub category: usize,
    /// Corner box in the anchors' normalized [0,1] frame.
    pub bbox: Box2D,
}

/// The two components of the per-image loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPair {
    pub loc: f64,
    pub conf: f64,
}

impl LossPair {
    pub fn total(&self) -> f64 {
        self.loc + self.conf
    }
}

/// Classification loss flavor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConfLoss {
    /// Cross-entropy over positives plus 3:1 hard-mined negatives.
    MinedCrossEntropy,
    /// Focal term −(1−p_t)^γ·log(p_t) over every anchor; no mining.
    Focal { gamma: f64 },
}

/// Gradients wrt the flattened detector outputs.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loc: Array2<f64>,
    pub conf: Array2<f64>,
}

/// Assign each anchor its matched target index (positives only).
///
/// Two passes: anchors adopt their best target when the IoU clears the
/// threshold, then each target claims its single highest-IoU anchor
/// outright. Ties resolve to the lower index on both sides.
pub fn match_anchors(anchors: &[Anchor], targets: &[Target]) -> Result<Vec<Option<usize>>> {
    for t in targets {
        if t.bbox.x2 <= t.bbox.x1 || t.bbox.y2 <= t.bbox.y1 {
            return Err(Error::InvalidArgument {
                op: "match_anchors",
                reason: format!("malformed box {:?}", t.bbox),
            });
        }
    }
    let mut assignment: Vec<Option<usize>> = vec![None; anchors.len()];
    if targets.is_empty() {
        return Ok(assignment);
    }
    let overlaps: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| {
            let ac = a.corners();
            targets.iter().map(|t| iou(&ac, &t.bbox)).collect()
        })
        .collect();
    for (ai, row) in overlaps.iter().enumerate() {
        let (best_t, best) = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        if best >= MATCH_IOU {
            assignment[ai] = Some(best_t);
        }
    }
    for ti in 0..targets.len() {
        let (best_a, _) = overlaps
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (ai, row)| {
                if row[ti] > bv {
                    (ai, row[ti])
                } else {
                    (bi, bv)
                }
            });
        assignment[best_a] = Some(ti);
    }
    Ok(assignment)
}

/// Smooth-L1 of one residual: quadratic inside the unit interval, linear
/// outside.
pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Stable per-row softmax.
fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Focal modulation of the true-class probability:
/// `−(1−p_t)^γ · log(p_t)`.
pub fn focal_loss(p_t: f64, gamma: f64) -> Result<f64> {
    if !(p_t > 0.0 && p_t <= 1.0) {
        return Err(Error::InvalidArgument {
            op: "focal_loss",
            reason: format!("p_t = {p_t} outside (0, 1]"),
        });
    }
    Ok(-(1.0 - p_t).powf(gamma) * p_t.ln())
}

/// Loss and output gradients for one image.
pub fn detection_loss(
    out: &DetectorOutput,
    anchors: &[Anchor],
    targets: &[Target],
    conf_kind: ConfLoss,
) -> Result<(LossPair, LossGrads)> {
    let n = anchors.len();
    let cols = out.conf.dim().1;
    if out.loc.dim() != (n, 4) || out.conf.dim().0 != n {
        return Err(Error::ShapeMismatch {
            op: "detection_loss",
            expected: format!("({n}, 4) loc rows and matching conf rows"),
            got: format!("{:?} / {:?}", out.loc.dim(), out.conf.dim()),
        });
    }
    let assignment = match_anchors(anchors, targets)?;
    let positives: Vec<usize> = (0..n).filter(|&i| assignment[i].is_some()).collect();
    let num_pos = positives.len();

    let mut grad_loc = Array2::zeros((n, 4));
    let mut grad_conf = Array2::zeros((n, cols));

    // Per-anchor class index: background 0, category c → c+1.
    let class_of = |ai: usize| assignment[ai].map_or(0, |ti| targets[ti].category + 1);

    // Localization over positives.
    let mut loc_loss = 0.0;
    if num_pos > 0 {
        let norm = 1.0 / num_pos as f64;
        for &ai in &positives {
            let ti = assignment[ai].expect("positive");
            let target = encode(&targets[ti].bbox, &anchors[ai]);
            for j in 0..4 {
                let d = out.loc[[ai, j]] - target[j];
                loc_loss += smooth_l1(d) * norm;
                grad_loc[[ai, j]] = smooth_l1_grad(d) * norm;
            }
        }
    }

    // Classification.
    let probs: Vec<Vec<f64>> = (0..n)
        .map(|ai| softmax_row(out.conf.row(ai).as_slice().expect("contiguous row")))
        .collect();
    let ce = |ai: usize, class: usize| -probs[ai][class].max(f64::MIN_POSITIVE).ln();

    let conf_loss = match conf_kind {
        ConfLoss::MinedCrossEntropy => {
            let selected: Vec<(usize, usize)> = if num_pos > 0 {
                // Hardest negatives by background cross-entropy, descending;
                // ties keep the lower anchor index (stable sort).
                let mut negatives: Vec<usize> =
                    (0..n).filter(|&i| assignment[i].is_none()).collect();
                negatives.sort_by(|&a, &b| {
                    ce(b, 0).partial_cmp(&ce(a, 0)).expect("finite losses")
                });
                let keep = (NEG_POS_RATIO * num_pos).min(negatives.len());
                positives
                    .iter()
                    .map(|&ai| (ai, class_of(ai)))
                    .chain(negatives[..keep].iter().map(|&ai| (ai, 0)))
                    .collect()
            } else {
                // No targets: pure-background term over every anchor.
                (0..n).map(|ai| (ai, 0)).collect()
            };
            let norm = if num_pos > 0 {
                1.0 / num_pos as f64
            } else {
                1.0 / n.max(1) as f64
            };
            let mut total = 0.0;
            for &(ai, class) in &selected {
                total += ce(ai, class) * norm;
                for j in 0..cols {
                    let indicator = if j == class { 1.0 } else { 0.0 };
                    grad_conf[[ai, j]] += (probs[ai][j] - indicator) * norm;
                }
            }
            total
        }
        ConfLoss::Focal { gamma } => {
            // Focal weighting replaces mining: every anchor contributes,
            // still normalized by the positive count.
            let norm = 1.0 / num_pos.max(1) as f64;
            let mut total = 0.0;
            for ai in 0..n {
                let t = class_of(ai);
                let p_t = probs[ai][t].max(f64::MIN_POSITIVE);
                total += focal_loss(p_t, gamma)? * norm;
                // d/dz_j of −(1−p)^γ·log p with p = softmax_t:
                // dL/dp = γ(1−p)^(γ−1)·log p − (1−p)^γ/p, chained through
                // dp/dz_j = p(δ_tj − p_j).
                let one_minus = 1.0 - p_t;
                let dl_dp = if gamma == 0.0 {
                    -1.0 / p_t
                } else {
                    gamma * one_minus.powf(gamma - 1.0) * p_t.ln() - one_minus.powf(gamma) / p_t
                };
                for j in 0..cols {
                    let indicator = if j == t { 1.0 } else { 0.0 };
                    grad_conf[[ai, j]] += dl_dp * p_t * (indicator - probs[ai][j]) * norm;
                }
            }
            total
        }
    };

    // Written to let NaN through: a non-finite loss is the caller's signal
    // that training diverged, and must surface as a value, not a panic.
    debug_assert!(!(loc_loss < 0.0) && !(conf_loss < 0.0));
    Ok((
        LossPair {
            loc: loc_loss,
            conf: conf_loss,
        },
        LossGrads {
            loc: grad_loc,
            conf: grad_conf,
        },
    ))
}
