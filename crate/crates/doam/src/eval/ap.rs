//! Average precision with all-points interpolation.
//!
//! Detections are ranked by confidence (ties keep input order), greedily
//! matched to the highest-IoU unmatched ground truth of the same image at
//! the IoU threshold, and the area under the interpolated precision–recall
//! curve is integrated exactly. Duplicate matches count as false positives.
//!
//! Edge cases are pinned: no ground truths and no detections is a perfect
//! 1.0; no ground truths but spurious detections is 0.0.

use crate::geom::{iou, Box2D};
use std::collections::BTreeMap;

/// One scored detection of a single category.
#[derive(Debug, Clone)]
pub struct ApDetection {
    pub image_id: String,
    pub confidence: f64,
    pub bbox: Box2D,
}

/// One ground-truth instance of the same category.
#[derive(Debug, Clone)]
pub struct ApGroundTruth {
    pub image_id: String,
    pub bbox: Box2D,
}

/// Cumulative true/false-positive flags in rank order.
fn match_ranked(
    dets: &[ApDetection],
    gts: &[ApGroundTruth],
    iou_thresh: f64,
) -> Vec<bool> {
    // Rank by confidence descending; stable sort preserves input order on
    // ties, which is the documented tie rule.
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .expect("finite confidences")
    });
    let mut by_image: BTreeMap<&str, Vec<(usize, bool)>> = BTreeMap::new();
    for (gi, gt) in gts.iter().enumerate() {
        by_image
            .entry(gt.image_id.as_str())
            .or_default()
            .push((gi, false));
    }
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut matched = false;
        if let Some(cands) = by_image.get_mut(det.image_id.as_str()) {
            // Highest-IoU unmatched ground truth; lower index wins ties.
            let mut best: Option<(usize, f64)> = None;
            for (slot, (gi, used)) in cands.iter().enumerate() {
                if *used {
                    continue;
                }
                let ov = iou(&det.bbox, &gts[*gi].bbox);
                if ov >= iou_thresh && best.map_or(true, |(_, bv)| ov > bv) {
                    best = Some((slot, ov));
                }
            }
            if let Some((slot, _)) = best {
                cands[slot].1 = true;
                matched = true;
            }
        }
        tp_flags.push(matched);
    }
    tp_flags
}

/// All-points interpolated average precision for one category.
pub fn average_precision(
    dets: &[ApDetection],
    gts: &[ApGroundTruth],
    iou_thresh: f64,
) -> f64 {
    if gts.is_empty() {
        // Nothing to find: perfect when nothing was claimed, zero otherwise.
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    if dets.is_empty() {
        return 0.0;
    }
    let tp_flags = match_ranked(dets, gts, iou_thresh);
    let num_gts = gts.len() as f64;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recalls = Vec::with_capacity(dets.len());
    let mut precisions = Vec::with_capacity(dets.len());
    for &is_tp in &tp_flags {
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recalls.push(tp / num_gts);
        precisions.push(tp / (tp + fp));
    }
    // Right-to-left precision envelope, then sum rectangle areas at recall
    // increments.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recalls.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * envelope[i];
            prev_recall = recalls[i];
        }
    }
    ap
}
