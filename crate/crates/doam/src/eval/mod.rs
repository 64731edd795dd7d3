//! Detection evaluation: per-category and per-occlusion-level average
//! precision, plus model complexity accounting.

mod ap;
mod complexity;

pub use ap::{average_precision, ApDetection, ApGroundTruth};
pub use complexity::{complexity_report, conv_flops, ComplexityReport};

pub use crate::geom::iou;

use crate::data::{Category, ImageRecord, OcclusionLevel};
use crate::error::{Error, Result};
use crate::geom::Box2D;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

/// One scored detection, the unit of the JSON-lines exchange format:
/// `{"image_id": ..., "category": ..., "box": [x1, y1, x2, y2],
/// "confidence": ...}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub category: Category,
    /// Pixel box, exclusive upper edges.
    pub bbox: Box2D,
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        let reason = if !(self.bbox.x1 < self.bbox.x2 && self.bbox.y1 < self.bbox.y2) {
            Some(format!("degenerate box {:?}", self.bbox.as_array()))
        } else if !(0.0..=1.0).contains(&self.confidence) {
            Some(format!("confidence {} outside [0, 1]", self.confidence))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidArgument {
                op: "Detection::validate",
                reason,
            }),
            None => Ok(()),
        }
    }
}

/// Wire form of [`Detection`].
#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image_id: String,
    category: Category,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    confidence: f64,
}

/// Serializes detections as JSON-lines.
pub fn write_detections<W: Write>(mut out: W, dets: &[Detection]) -> Result<()> {
    for det in dets {
        let record = DetectionRecord {
            image_id: det.image_id.clone(),
            category: det.category.clone(),
            bbox: det.bbox.as_array(),
            confidence: det.confidence,
        };
        let line = serde_json::to_string(&record)?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io("<detections stream>", e))?;
    }
    Ok(())
}

/// Parses and validates JSON-lines detections; blank lines are skipped.
pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<detections stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("detections line {}: {e}", idx + 1))
        })?;
        let det = Detection {
            image_id: record.image_id,
            category: record.category,
            bbox: Box2D::new(record.bbox[0], record.bbox[1], record.bbox[2], record.bbox[3]),
            confidence: record.confidence,
        };
        det.validate()
            .map_err(|e| Error::Dataset(format!("detections line {}: {e}", idx + 1)))?;
        dets.push(det);
    }
    Ok(dets)
}

/// Evaluation grouping: category-only, or category plus per-occlusion-level
/// subsets evaluated independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Category,
    OcclusionLevel,
}

/// Evaluation summary. `map` is the unweighted mean of `per_category`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresh: f64,
    pub per_category: BTreeMap<String, f64>,
    pub map: f64,
    /// mAP of each occlusion-level subset, when grouped by level.
    pub per_level: Option<BTreeMap<String, f64>>,
    pub num_gts: usize,
    pub num_dets: usize,
}

/// Per-category APs over a set of images, and their unweighted mean.
/// Categories are the union of ground-truth and detection categories, so a
/// spurious never-annotated class drags the mean down rather than vanishing.
fn per_category_ap(
    dets: &[&Detection],
    records: &[&ImageRecord],
    iou_thresh: f64,
) -> (BTreeMap<String, f64>, f64) {
    let mut categories: BTreeSet<String> = BTreeSet::new();
    for rec in records {
        for ann in &rec.annotations {
            categories.insert(ann.category.name().to_string());
        }
    }
    for det in dets {
        categories.insert(det.category.name().to_string());
    }
    let mut per_category = BTreeMap::new();
    for cat in &categories {
        let cat_dets: Vec<ApDetection> = dets
            .iter()
            .filter(|d| d.category.name() == cat)
            .map(|d| ApDetection {
                image_id: d.image_id.clone(),
                confidence: d.confidence,
                bbox: d.bbox,
            })
            .collect();
        let cat_gts: Vec<ApGroundTruth> = records
            .iter()
            .flat_map(|r| r.annotations.iter())
            .filter(|a| a.category.name() == cat)
            .map(|a| ApGroundTruth {
                image_id: a.image_id.clone(),
                bbox: a.bbox,
            })
            .collect();
        per_category.insert(cat.clone(), average_precision(&cat_dets, &cat_gts, iou_thresh));
    }
    let map = if per_category.is_empty() {
        // No ground truth and no detections anywhere: vacuously perfect.
        1.0
    } else {
        per_category.values().sum::<f64>() / per_category.len() as f64
    };
    (per_category, map)
}

/// Evaluates detections against dataset records. Per-category APs always
/// cover the whole record set; `GroupBy::OcclusionLevel` additionally
/// evaluates each known OL subset independently (both detections and ground
/// truths restricted to that subset's images).
pub fn evaluate(
    dets: &[Detection],
    records: &[ImageRecord],
    group_by: GroupBy,
    iou_thresh: f64,
) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::InvalidArgument {
            op: "evaluate",
            reason: format!("iou_thresh {iou_thresh} outside [0, 1]"),
        });
    }
    for det in dets {
        det.validate()?;
    }
    let all_dets: Vec<&Detection> = dets.iter().collect();
    let all_records: Vec<&ImageRecord> = records.iter().collect();
    let (per_category, map) = per_category_ap(&all_dets, &all_records, iou_thresh);
    let per_level = match group_by {
        GroupBy::Category => None,
        GroupBy::OcclusionLevel => {
            let mut table = BTreeMap::new();
            for level in [
                OcclusionLevel::Level1,
                OcclusionLevel::Level2,
                OcclusionLevel::Level3,
            ] {
                let subset: Vec<&ImageRecord> = records
                    .iter()
                    .filter(|r| r.occlusion_level == level)
                    .collect();
                if subset.is_empty() {
                    continue;
                }
                let ids: BTreeSet<&str> =
                    subset.iter().map(|r| r.image_id.as_str()).collect();
                let subset_dets: Vec<&Detection> = dets
                    .iter()
                    .filter(|d| ids.contains(d.image_id.as_str()))
                    .collect();
                let (_, level_map) = per_category_ap(&subset_dets, &subset, iou_thresh);
                table.insert(
                    level.dir_name().expect("known level").to_string(),
                    level_map,
                );
            }
            Some(table)
        }
    };
    Ok(EvalReport {
        iou_thresh,
        per_category,
        map,
        per_level,
        num_gts: records.iter().map(|r| r.annotations.len()).sum(),
        num_dets: dets.len(),
    })
}
