//! Prediction decoding: softmax scoring, thresholding, class-wise NMS.

use serde::{Deserialize, Serialize};

use crate::detector::anchors::Anchor;
use crate::detector::boxes::decode;
use crate::detector::model::DetectorOutput;
use crate::error::{Error, Result};
use crate::geom::{iou, Box2D};

/// One decoded detection in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Foreground category index (0-based).
    pub category: usize,
    pub confidence: f64,
    /// Corner box in pixels, clipped to the image.
    pub bbox: Box2D,
}

/// Decoding thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Minimum softmax score to keep a candidate.
    pub conf_thresh: f64,
    /// Same-class overlap above which the lower-scored box is suppressed.
    pub nms_iou: f64,
    /// Maximum detections returned per image.
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            conf_thresh: 0.05,
            nms_iou: 0.45,
            top_k: 50,
        }
    }
}

/// Greedy non-maximum suppression over score-sorted candidates; returns the
/// indices kept. Ties in score resolve to the earlier candidate.
pub fn nms(boxes: &[Box2D], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if keep.iter().all(|&j| iou(&boxes[i], &boxes[j]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Decode flattened predictions into per-image detections.
pub fn decode_predictions(
    out: &DetectorOutput,
    anchors: &[Anchor],
    image_hw: (usize, usize),
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&cfg.conf_thresh) || !(0.0..=1.0).contains(&cfg.nms_iou) {
        return Err(Error::InvalidArgument {
            op: "decode_predictions",
            reason: format!(
                "thresholds must lie in [0,1], got conf {} nms {}",
                cfg.conf_thresh, cfg.nms_iou
            ),
        });
    }
    let n = anchors.len();
    if out.loc.dim().0 != n || out.conf.dim().0 != n {
        return Err(Error::ShapeMismatch {
            op: "decode_predictions",
            expected: format!("{n} prediction rows"),
            got: format!("{:?}/{:?}", out.loc.dim(), out.conf.dim()),
        });
    }
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let cols = out.conf.dim().1;

    // Softmax scores and pixel boxes per anchor.
    let mut probs = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    for ai in 0..n {
        let row = out.conf.row(ai);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        probs.push(exps.into_iter().map(|e| e / sum).collect::<Vec<f64>>());
        let offsets = [
            out.loc[[ai, 0]],
            out.loc[[ai, 1]],
            out.loc[[ai, 2]],
            out.loc[[ai, 3]],
        ];
        let b = decode(&offsets, &anchors[ai]);
        boxes.push(Box2D::new(
            (b.x1 * iw).clamp(0.0, iw),
            (b.y1 * ih).clamp(0.0, ih),
            (b.x2 * iw).clamp(0.0, iw),
            (b.y2 * ih).clamp(0.0, ih),
        ));
    }

    // Class-wise suppression over thresholded candidates (background column
    // 0 is skipped).
    let mut detections: Vec<Detection> = Vec::new();
    for class in 1..cols {
        let cands: Vec<usize> = (0..n).filter(|&ai| probs[ai][class] >= cfg.conf_thresh).collect();
        if cands.is_empty() {
            continue;
        }
        let cboxes: Vec<Box2D> = cands.iter().map(|&ai| boxes[ai]).collect();
        let cscores: Vec<f64> = cands.iter().map(|&ai| probs[ai][class]).collect();
        for k in nms(&cboxes, &cscores, cfg.nms_iou) {
            detections.push(Detection {
                category: class - 1,
                confidence: cscores[k],
                bbox: cboxes[k],
            });
        }
    }
    detections.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .expect("finite confidences")
            .then(a.category.cmp(&b.category))
    });
    detections.truncate(cfg.top_k);
    Ok(detections)
}
