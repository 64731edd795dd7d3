//! Dataset domain types: categories, occlusion levels, annotations, and
//! per-split manifests.

use crate::error::{Error, Result};
use crate::geom::Box2D;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

/// The five prohibited-item categories of the security-inspection corpus:
/// Folding Knife, Straight Knife, Scissor, Utility Knife, Multi-tool Knife.
pub const XRAY_CLASSES: [&str; 5] = ["FO", "ST", "SC", "UT", "MU"];

/// Shape classes used by the synthetic substitute generator.
pub const SYNTH_CLASSES: [&str; 5] = ["blade", "disc", "ring", "wedge", "cross"];

/// An object category, validated against the declaring dataset's class list
/// at load time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Category(String);

impl Category {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument {
                op: "Category::new",
                reason: format!("category name must be non-empty without whitespace, got {name:?}"),
            });
        }
        Ok(Category(name))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Degree of occlusion of an annotated object. Known levels come from the
/// test-split subset directory the image lives in; images outside those
/// subsets are `Unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OcclusionLevel {
    Unknown,
    /// No or slight occlusion.
    Level1,
    /// Partial occlusion.
    Level2,
    /// Severe or full occlusion.
    Level3,
}

impl OcclusionLevel {
    /// Directory name of the test subset ("OL1".."OL3"), if known.
    pub fn dir_name(self) -> Option<&'static str> {
        match self {
            OcclusionLevel::Unknown => None,
            OcclusionLevel::Level1 => Some("OL1"),
            OcclusionLevel::Level2 => Some("OL2"),
            OcclusionLevel::Level3 => Some("OL3"),
        }
    }

    pub fn from_dir_name(name: &str) -> Option<Self> {
        match name {
            "OL1" => Some(OcclusionLevel::Level1),
            "OL2" => Some(OcclusionLevel::Level2),
            "OL3" => Some(OcclusionLevel::Level3),
            _ => None,
        }
    }

    /// Label for an occluded-area fraction under (low, high) thresholds.
    pub fn from_fraction(f: f64, thresholds: (f64, f64)) -> Self {
        if f < thresholds.0 {
            OcclusionLevel::Level1
        } else if f < thresholds.1 {
            OcclusionLevel::Level2
        } else {
            OcclusionLevel::Level3
        }
    }
}

impl fmt::Display for OcclusionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name().unwrap_or("unknown"))
    }
}

/// One annotated object instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub category: Category,
    /// Pixel box with exclusive upper edges: 0 ≤ x1 < x2 ≤ width.
    pub bbox: Box2D,
    pub occlusion_level: OcclusionLevel,
}

impl Annotation {
    /// Checks box ordering and image bounds.
    pub fn validate(&self, width: usize, height: usize) -> std::result::Result<(), String> {
        let b = &self.bbox;
        if !(b.x1 < b.x2) {
            return Err(format!("x2 ≤ x1 ({} ≤ {})", b.x2, b.x1));
        }
        if !(b.y1 < b.y2) {
            return Err(format!("y2 ≤ y1 ({} ≤ {})", b.y2, b.y1));
        }
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > width as f64 || b.y2 > height as f64 {
            return Err(format!(
                "box ({}, {}, {}, {}) outside image bounds {}x{}",
                b.x1, b.y1, b.x2, b.y2, width, height
            ));
        }
        Ok(())
    }
}

/// One image with its annotations (possibly zero: a background image).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub occlusion_level: OcclusionLevel,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Summary statistics of one split, computed from its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub num_images: usize,
    /// Declared class list; annotation categories must come from it.
    pub classes: Vec<String>,
    /// Instance counts per category (instances, not images — an image may
    /// hold several items, so the sum may exceed `num_images`).
    pub per_category: BTreeMap<String, usize>,
    /// Image counts per occlusion level, present when the split is
    /// partitioned into OL subsets.
    pub per_level: Option<BTreeMap<String, usize>>,
    /// (height, width) when every image agrees, else None.
    pub resolution: Option<(usize, usize)>,
}

impl DatasetManifest {
    /// Builds the manifest of `records` under a declared class list.
    pub fn from_records(split: Split, classes: &[String], records: &[ImageRecord]) -> Self {
        let mut per_category: BTreeMap<String, usize> =
            classes.iter().map(|c| (c.clone(), 0)).collect();
        let mut per_level: BTreeMap<String, usize> = BTreeMap::new();
        let mut any_level = false;
        let mut resolution: Option<Option<(usize, usize)>> = None;
        for rec in records {
            for ann in &rec.annotations {
                *per_category.entry(ann.category.name().to_string()).or_insert(0) += 1;
            }
            if let Some(dir) = rec.occlusion_level.dir_name() {
                any_level = true;
                *per_level.entry(dir.to_string()).or_insert(0) += 1;
            }
            let dims = Some((rec.height, rec.width));
            resolution = Some(match resolution {
                None => dims,
                Some(prev) if prev == dims => prev,
                Some(_) => None,
            });
        }
        DatasetManifest {
            split,
            num_images: records.len(),
            classes: classes.to_vec(),
            per_category,
            per_level: if any_level { Some(per_level) } else { None },
            resolution: resolution.flatten(),
        }
    }

    /// Total instance count across categories.
    pub fn num_instances(&self) -> usize {
        self.per_category.values().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_rejects_empty_and_whitespace() {
        assert!(Category::new("FO").is_ok());
        assert!(Category::new("").is_err());
        assert!(Category::new("a b").is_err());
    }

    #[test]
    fn level_thresholds_partition_the_fraction_range() {
        let t = (0.1, 0.5);
        assert_eq!(OcclusionLevel::from_fraction(0.0, t), OcclusionLevel::Level1);
        assert_eq!(OcclusionLevel::from_fraction(0.099, t), OcclusionLevel::Level1);
        assert_eq!(OcclusionLevel::from_fraction(0.1, t), OcclusionLevel::Level2);
        assert_eq!(OcclusionLevel::from_fraction(0.499, t), OcclusionLevel::Level2);
        assert_eq!(OcclusionLevel::from_fraction(0.5, t), OcclusionLevel::Level3);
        assert_eq!(OcclusionLevel::from_fraction(1.0, t), OcclusionLevel::Level3);
    }

    #[test]
    fn annotation_bounds_checking() {
        let ann = Annotation {
            image_id: "a".into(),
            category: Category::new("FO").unwrap(),
            bbox: Box2D::new(10.0, 10.0, 5.0, 20.0),
            occlusion_level: OcclusionLevel::Unknown,
        };
        let err = ann.validate(48, 48).unwrap_err();
        assert!(err.contains("x2 ≤ x1"), "{err}");
        let ann2 = Annotation {
            bbox: Box2D::new(10.0, 10.0, 50.0, 20.0),
            ..ann.clone()
        };
        assert!(ann2.validate(48, 48).is_err());
        let ok = Annotation {
            bbox: Box2D::new(0.0, 0.0, 48.0, 48.0),
            ..ann
        };
        assert!(ok.validate(48, 48).is_ok());
    }

    #[test]
    fn manifest_counts_instances_and_levels() {
        let cat = |s: &str| Category::new(s).unwrap();
        let rec = |id: &str, lvl, cats: &[&str]| ImageRecord {
            image_id: id.into(),
            image_path: PathBuf::from(format!("{id}.png")),
            width: 48,
            height: 48,
            occlusion_level: lvl,
            annotations: cats
                .iter()
                .map(|c| Annotation {
                    image_id: id.into(),
                    category: cat(c),
                    bbox: Box2D::new(0.0, 0.0, 10.0, 10.0),
                    occlusion_level: lvl,
                })
                .collect(),
        };
        let classes: Vec<String> = XRAY_CLASSES.iter().map(|s| s.to_string()).collect();
        let records = vec![
            rec("a", OcclusionLevel::Level1, &["FO", "FO"]),
            rec("b", OcclusionLevel::Level3, &["MU"]),
            rec("c", OcclusionLevel::Level1, &[]),
        ];
        let m = DatasetManifest::from_records(Split::Test, &classes, &records);
        assert_eq!(m.num_images, 3);
        assert_eq!(m.per_category["FO"], 2);
        assert_eq!(m.per_category["MU"], 1);
        assert_eq!(m.per_category["ST"], 0);
        assert_eq!(m.num_instances(), 3);
        let levels = m.per_level.unwrap();
        assert_eq!(levels["OL1"], 2);
        assert_eq!(levels["OL3"], 1);
        assert_eq!(m.resolution, Some((48, 48)));
    }
}
