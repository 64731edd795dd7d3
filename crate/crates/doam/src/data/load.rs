//! Dataset loading and distribution validation.
//!
//! On-disk layout: `root/{train,test}/images/*.png|jpg` with one plain-text
//! annotation file per image under `annotations/`, lines `category x1 y1 x2
//! y2` (pixel coordinates, exclusive upper edges). The test split may be
//! partitioned into occlusion subsets `OL1/ OL2/ OL3/`, each with its own
//! `images/` and `annotations/`. A `manifest.json` next to `images/`
//! declares the class list; without one the five X-ray classes are assumed.

use crate::data::types::{
    Annotation, Category, DatasetManifest, ImageRecord, OcclusionLevel, Split, XRAY_CLASSES,
};
use crate::error::{Error, Result};
use crate::geom::Box2D;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

/// Parses one annotation line: `category x1 y1 x2 y2`.
fn parse_line(line: &str, file: &Path, lineno: usize, image_id: &str) -> Result<(Category, Box2D)> {
    let err = |reason: String| Error::Annotation {
        file: file.to_path_buf(),
        line: lineno,
        reason,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(err(format!(
            "expected `category x1 y1 x2 y2`, got {} fields",
            fields.len()
        )));
    }
    let category = Category::new(fields[0])
        .map_err(|e| err(format!("bad category: {e}")))?;
    let mut coords = [0.0f64; 4];
    for (i, raw) in fields[1..].iter().enumerate() {
        coords[i] = raw
            .parse::<f64>()
            .map_err(|_| err(format!("unparseable coordinate {raw:?}")))?;
        if !coords[i].is_finite() {
            return Err(err(format!("non-finite coordinate {raw:?}")));
        }
    }
    let _ = image_id;
    Ok((
        category,
        Box2D::new(coords[0], coords[1], coords[2], coords[3]),
    ))
}

/// Loads one `images/` + `annotations/` directory pair; every record gets
/// `level`. Records come back sorted by image id.
fn load_dir(dir: &Path, level: OcclusionLevel, classes: &[String]) -> Result<Vec<ImageRecord>> {
    let images_dir = dir.join("images");
    let ann_dir = dir.join("annotations");
    let mut image_paths: Vec<PathBuf> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(&images_dir, e))?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    image_paths.sort();
    let mut records = Vec::with_capacity(image_paths.len());
    for image_path in image_paths {
        let image_id = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("bad image filename {image_path:?}")))?
            .to_string();
        let (width, height) = image::image_dimensions(&image_path)?;
        let (width, height) = (width as usize, height as usize);
        let ann_path = ann_dir.join(format!("{image_id}.txt"));
        let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let mut annotations = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (category, bbox) = parse_line(line, &ann_path, lineno, &image_id)?;
            if !classes.iter().any(|c| c == category.name()) {
                return Err(Error::Annotation {
                    file: ann_path.clone(),
                    line: lineno,
                    reason: format!(
                        "category {:?} not in declared class list {:?}",
                        category.name(),
                        classes
                    ),
                });
            }
            let ann = Annotation {
                image_id: image_id.clone(),
                category,
                bbox,
                occlusion_level: level,
            };
            if let Err(reason) = ann.validate(width, height) {
                return Err(Error::Annotation {
                    file: ann_path.clone(),
                    line: lineno,
                    reason,
                });
            }
            annotations.push(ann);
        }
        records.push(ImageRecord {
            image_id,
            image_path,
            width,
            height,
            occlusion_level: level,
            annotations,
        });
    }
    Ok(records)
}

/// Reads the declared class list from `manifest.json` if present.
fn declared_classes(split_dir: &Path) -> Result<Vec<String>> {
    let path = split_dir.join("manifest.json");
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        Ok(manifest.classes)
    } else {
        Ok(XRAY_CLASSES.iter().map(|s| s.to_string()).collect())
    }
}

/// Loads a split. The unpartitioned directory (if any) loads with level
/// `Unknown`, followed by the OL1/OL2/OL3 subsets in order.
pub fn load_dataset(root: &Path, split: Split) -> Result<(Vec<ImageRecord>, DatasetManifest)> {
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing split directory {split_dir:?}"
        )));
    }
    let classes = declared_classes(&split_dir)?;
    let mut records = Vec::new();
    let mut found_any = false;
    if split_dir.join("images").is_dir() {
        found_any = true;
        records.extend(load_dir(&split_dir, OcclusionLevel::Unknown, &classes)?);
    }
    if split == Split::Test {
        for level in [
            OcclusionLevel::Level1,
            OcclusionLevel::Level2,
            OcclusionLevel::Level3,
        ] {
            let sub = split_dir.join(level.dir_name().expect("known level"));
            if sub.is_dir() {
                found_any = true;
                records.extend(load_dir(&sub, level, &classes)?);
            }
        }
    }
    if !found_any {
        return Err(Error::Dataset(format!(
            "no images/ directory under {split_dir:?} (nor OL subsets)"
        )));
    }
    let manifest = DatasetManifest::from_records(split, &classes, &records);
    Ok((records, manifest))
}

/// Expected counts for a split (or for the combined dataset); absent fields
/// are not checked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpectedDistribution {
    pub total_images: Option<usize>,
    /// Expected instance counts per category.
    pub per_category: Option<BTreeMap<String, usize>>,
    /// Expected image counts per occlusion level.
    pub per_level: Option<BTreeMap<String, usize>>,
}

fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl ExpectedDistribution {
    /// Published training-split distribution.
    pub fn xray_train() -> Self {
        ExpectedDistribution {
            total_images: Some(7109),
            per_category: Some(counts(&[
                ("FO", 1589),
                ("ST", 809),
                ("SC", 1494),
                ("UT", 1635),
                ("MU", 1612),
            ])),
            per_level: None,
        }
    }

    /// Published testing-split distribution, including occlusion subsets.
    pub fn xray_test() -> Self {
        ExpectedDistribution {
            total_images: Some(1776),
            per_category: Some(counts(&[
                ("FO", 404),
                ("ST", 235),
                ("SC", 369),
                ("UT", 343),
                ("MU", 430),
            ])),
            per_level: Some(counts(&[("OL1", 922), ("OL2", 548), ("OL3", 306)])),
        }
    }

    /// Published whole-dataset category totals (train + test).
    pub fn xray_combined() -> Self {
        ExpectedDistribution {
            total_images: Some(8885),
            per_category: Some(counts(&[
                ("FO", 1993),
                ("ST", 1044),
                ("SC", 1863),
                ("UT", 1978),
                ("MU", 2042),
            ])),
            per_level: None,
        }
    }
}

/// One count that differs from the expectation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub field: String,
    pub expected: usize,
    pub actual: usize,
}

/// Result of comparing a manifest to an expected distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub mismatches: Vec<Mismatch>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "distribution matches expectation");
        }
        for (i, m) in self.mismatches.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(
                f,
                "{}: expected {}, actual {}",
                m.field, m.expected, m.actual
            )?;
        }
        Ok(())
    }
}

/// Compares manifest counts to the expectation; never errors, mismatches
/// are listed in the report (field order: total, categories, levels).
pub fn validate_distribution(
    manifest: &DatasetManifest,
    expected: &ExpectedDistribution,
) -> ValidationReport {
    let mut mismatches = Vec::new();
    if let Some(total) = expected.total_images {
        if manifest.num_images != total {
            mismatches.push(Mismatch {
                field: "total_images".into(),
                expected: total,
                actual: manifest.num_images,
            });
        }
    }
    if let Some(per_category) = &expected.per_category {
        for (cat, &want) in per_category {
            let got = manifest.per_category.get(cat).copied().unwrap_or(0);
            if got != want {
                mismatches.push(Mismatch {
                    field: format!("category:{cat}"),
                    expected: want,
                    actual: got,
                });
            }
        }
    }
    if let Some(per_level) = &expected.per_level {
        let empty = BTreeMap::new();
        let actual_levels = manifest.per_level.as_ref().unwrap_or(&empty);
        for (level, &want) in per_level {
            let got = actual_levels.get(level).copied().unwrap_or(0);
            if got != want {
                mismatches.push(Mismatch {
                    field: format!("level:{level}"),
                    expected: want,
                    actual: got,
                });
            }
        }
    }
    ValidationReport { mismatches }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::Split;

    fn manifest_from(expected: &ExpectedDistribution, split: Split) -> DatasetManifest {
        DatasetManifest {
            split,
            num_images: expected.total_images.unwrap(),
            classes: XRAY_CLASSES.iter().map(|s| s.to_string()).collect(),
            per_category: expected.per_category.clone().unwrap(),
            per_level: expected.per_level.clone(),
            resolution: Some((954, 1225)),
        }
    }

    #[test]
    fn preset_match_yields_empty_report() {
        for (expected, split) in [
            (ExpectedDistribution::xray_train(), Split::Train),
            (ExpectedDistribution::xray_test(), Split::Test),
        ] {
            let manifest = manifest_from(&expected, split);
            let report = validate_distribution(&manifest, &expected);
            assert!(report.is_ok(), "{report}");
        }
    }

    #[test]
    fn occlusion_subset_counts_sum_to_the_test_total() {
        let test = ExpectedDistribution::xray_test();
        let level_sum: usize = test.per_level.as_ref().unwrap().values().sum();
        assert_eq!(level_sum, 922 + 548 + 306);
        assert_eq!(level_sum, test.total_images.unwrap());
    }

    #[test]
    fn instance_counts_exceed_image_counts_by_multi_item_images() {
        // A handful of images hold more than one item: 30 extra instances
        // in training, 5 in testing.
        let train = ExpectedDistribution::xray_train();
        let test = ExpectedDistribution::xray_test();
        let combined = ExpectedDistribution::xray_combined();
        let train_instances: usize = train.per_category.as_ref().unwrap().values().sum();
        let test_instances: usize = test.per_category.as_ref().unwrap().values().sum();
        assert_eq!(train_instances, 7109 + 30);
        assert_eq!(test_instances, 1776 + 5);
        for (cat, &total) in combined.per_category.as_ref().unwrap() {
            let t = train.per_category.as_ref().unwrap()[cat];
            let e = test.per_category.as_ref().unwrap()[cat];
            assert_eq!(t + e, total, "category {cat}");
        }
    }

    #[test]
    fn single_perturbation_yields_exactly_one_mismatch() {
        let expected = ExpectedDistribution::xray_train();
        let mut manifest = manifest_from(&expected, Split::Train);
        *manifest.per_category.get_mut("SC").unwrap() += 1;
        let report = validate_distribution(&manifest, &expected);
        assert_eq!(report.mismatches.len(), 1);
        assert_eq!(report.mismatches[0].field, "category:SC");
        assert_eq!(report.mismatches[0].expected, 1494);
        assert_eq!(report.mismatches[0].actual, 1495);
    }

    #[test]
    fn missing_level_table_counts_as_zero() {
        let expected = ExpectedDistribution::xray_test();
        let mut manifest = manifest_from(&expected, Split::Test);
        manifest.per_level = None;
        let report = validate_distribution(&manifest, &expected);
        let level_mismatches: Vec<_> = report
            .mismatches
            .iter()
            .filter(|m| m.field.starts_with("level:"))
            .collect();
        assert_eq!(level_mismatches.len(), 3);
        assert!(level_mismatches.iter().all(|m| m.actual == 0));
    }

    mod disk {
        use super::super::*;
        use crate::data::types::{OcclusionLevel, Split};

        fn write_png(path: &Path, width: u32, height: u32) {
            let img = image::RgbImage::from_fn(width, height, |x, y| {
                image::Rgb([(x % 256) as u8, (y % 256) as u8, 128])
            });
            img.save(path).unwrap();
        }

        fn scaffold(root: &Path, split: &str) -> (PathBuf, PathBuf) {
            let images = root.join(split).join("images");
            let anns = root.join(split).join("annotations");
            std::fs::create_dir_all(&images).unwrap();
            std::fs::create_dir_all(&anns).unwrap();
            (images, anns)
        }

        #[test]
        fn loads_records_and_computes_manifest() {
            let tmp = tempfile::tempdir().unwrap();
            let (images, anns) = scaffold(tmp.path(), "train");
            write_png(&images.join("img_a.png"), 48, 32);
            std::fs::write(anns.join("img_a.txt"), "FO 1 2 10 20\nMU 5 5 40 30\n").unwrap();
            write_png(&images.join("img_b.png"), 48, 32);
            std::fs::write(anns.join("img_b.txt"), "").unwrap();
            let (records, manifest) = load_dataset(tmp.path(), Split::Train).unwrap();
            assert_eq!(records.len(), 2);
            assert_eq!(records[0].image_id, "img_a");
            assert_eq!(records[0].annotations.len(), 2);
            assert_eq!(records[0].annotations[0].category.name(), "FO");
            assert_eq!(records[0].annotations[0].bbox, Box2D::new(1.0, 2.0, 10.0, 20.0));
            assert_eq!(records[0].occlusion_level, OcclusionLevel::Unknown);
            // Empty annotation file: a legal background image.
            assert!(records[1].annotations.is_empty());
            assert_eq!(manifest.num_images, 2);
            assert_eq!(manifest.per_category["FO"], 1);
            assert_eq!(manifest.per_category["MU"], 1);
            assert_eq!(manifest.resolution, Some((32, 48)));
        }

        #[test]
        fn inverted_box_reports_file_and_line() {
            let tmp = tempfile::tempdir().unwrap();
            let (images, anns) = scaffold(tmp.path(), "train");
            write_png(&images.join("x.png"), 48, 48);
            std::fs::write(anns.join("x.txt"), "MU 0 0 10 10\nFO 10 10 5 20\n").unwrap();
            let err = load_dataset(tmp.path(), Split::Train).unwrap_err();
            match err {
                Error::Annotation { file, line, reason } => {
                    assert!(file.ends_with("x.txt"));
                    assert_eq!(line, 2);
                    assert!(reason.contains("x2 ≤ x1"), "{reason}");
                }
                other => panic!("unexpected error {other:?}"),
            }
        }

        #[test]
        fn unparseable_line_and_unknown_category_are_rejected() {
            let tmp = tempfile::tempdir().unwrap();
            let (images, anns) = scaffold(tmp.path(), "train");
            write_png(&images.join("x.png"), 48, 48);
            std::fs::write(anns.join("x.txt"), "FO 0 0 ten 10\n").unwrap();
            let err = load_dataset(tmp.path(), Split::Train).unwrap_err();
            assert!(matches!(err, Error::Annotation { line: 1, .. }), "{err:?}");

            std::fs::write(anns.join("x.txt"), "ZZ 0 0 10 10\n").unwrap();
            let err = load_dataset(tmp.path(), Split::Train).unwrap_err();
            match err {
                Error::Annotation { reason, .. } => {
                    assert!(reason.contains("class list"), "{reason}")
                }
                other => panic!("unexpected error {other:?}"),
            }
        }

        #[test]
        fn missing_annotation_file_is_an_error() {
            let tmp = tempfile::tempdir().unwrap();
            let (images, _anns) = scaffold(tmp.path(), "train");
            write_png(&images.join("x.png"), 48, 48);
            let err = load_dataset(tmp.path(), Split::Train).unwrap_err();
            assert!(matches!(err, Error::Io { .. }), "{err:?}");
        }

        #[test]
        fn test_split_reads_occlusion_subsets_in_order() {
            let tmp = tempfile::tempdir().unwrap();
            for level in ["OL1", "OL2", "OL3"] {
                let (images, anns) = scaffold(tmp.path(), &format!("test/{level}"));
                let id = format!("{}_img", level.to_lowercase());
                write_png(&images.join(format!("{id}.png")), 48, 48);
                std::fs::write(anns.join(format!("{id}.txt")), "SC 0 0 10 10\n").unwrap();
            }
            let (records, manifest) = load_dataset(tmp.path(), Split::Test).unwrap();
            assert_eq!(records.len(), 3);
            assert_eq!(records[0].occlusion_level, OcclusionLevel::Level1);
            assert_eq!(records[2].occlusion_level, OcclusionLevel::Level3);
            let levels = manifest.per_level.unwrap();
            assert_eq!(levels["OL1"], 1);
            assert_eq!(levels["OL2"], 1);
            assert_eq!(levels["OL3"], 1);
        }
    }
}
