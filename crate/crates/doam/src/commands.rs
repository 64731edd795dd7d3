//! Command implementations behind the CLI binary.
//!
//! Each command is a plain function over paths and an [`AppConfig`], so the
//! whole pipeline can be driven in-process (tests do) or from the shipped
//! binary. Every command is deterministic given (config, seed, checkpoint).
//!
//! The config file is flat `key=value` text (blank lines and `#` comments
//! ignored). It carries the training keys (see [`crate::train::TrainConfig`])
//! plus:
//!
//! | key                  | default        | meaning                                  |
//! |----------------------|----------------|------------------------------------------|
//! | `use_doam`           | `true`         | attach the attention front-end           |
//! | `conf_thresh`        | `0.05`         | decoder score floor                      |
//! | `nms_iou`            | `0.45`         | decoder NMS overlap                      |
//! | `top_k`              | `200`          | decoder max detections per image         |
//! | `eval_iou`           | `0.5`          | AP matching threshold                    |
//! | `doam_blocks`        | `2`            | conv blocks per attention branch         |
//! | `doam_channels`      | `16`           | feature width of both attention branches |
//! | `region_scales`      | `5,10,15`      | region tile sizes, ascending             |
//! | `backbone_channels`  | `12,16,24,32,32` | backbone widths, one per block         |
//! | `head_blocks`        | `3,4`          | backbone blocks feeding detection heads  |
//! | `image_size`         | `48`           | generated image height = width           |
//! | `train_images`       | `200`          | generated training images                |
//! | `test_images`        | `60`           | generated test images                    |
//! | `occlusion_density`  | `1`            | occluder aggressiveness, 0 disables      |
//! | `target_size`        | `16`           | generated target diameter (px)           |
//! | `targets_per_image`  | `1`            | targets per training image               |
//! | `clutter`            | `3`            | distractor shapes per image              |
//! | `expected_preset`    | `none`         | distribution preset for validate-dataset |

use crate::checkpoint::{load_model_state, model_to_archive, Archive};
use crate::data::{
    generate_synthetic, load_dataset, load_image_chw, validate_distribution, DatasetManifest,
    ExpectedDistribution, ImageRecord, OcclusionLevel, Split, SynthConfig, SynthOutput,
    ValidationReport,
};
use crate::detector::{decode_predictions, DecodeConfig, DetectorConfig};
use crate::doam::DoamConfig;
use crate::error::{Error, Result};
use crate::eval::{complexity_report, evaluate, write_detections, ComplexityReport, Detection,
    EvalReport, GroupBy};
use crate::nn::Mode;
use crate::parallel;
use crate::pipeline::{DetectionModel, ModelConfig};
use crate::train::{kv_lines, to_samples, write_report_lines, EpochReport, Trainer, TrainConfig};
use crate::viz::{attention_viz, grad_cam, gray_png_bytes, overlay, rgb_png_bytes};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Architecture dimensions, config-adjustable so desk-scale runs can use a
/// compact model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub doam_blocks: usize,
    pub doam_channels: usize,
    pub region_scales: Vec<usize>,
    pub backbone_channels: Vec<usize>,
    pub head_blocks: Vec<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        let doam = DoamConfig::default();
        let det = DetectorConfig::default();
        ModelDims {
            doam_blocks: doam.edge_blocks,
            doam_channels: doam.edge_channels,
            region_scales: doam.region_scales,
            backbone_channels: det.channels,
            head_blocks: det.head_blocks,
        }
    }
}

/// Full command-level configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval_iou: f64,
    pub use_doam: bool,
    pub dims: ModelDims,
    pub synth: SynthConfig,
    /// Distribution preset checked by `validate-dataset`:
    /// `xray-train`, `xray-test`, or `xray-combined`.
    pub expected_preset: Option<String>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval_iou: 0.5,
            use_doam: true,
            dims: ModelDims::default(),
            synth: SynthConfig::default(),
            expected_preset: None,
        }
    }
}

fn parse_list(value: &str, lineno: usize, key: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| Error::Config(format!("line {lineno}: bad {key} entry {part:?}")))
        })
        .collect()
}

impl AppConfig {
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = AppConfig::default();
        for (lineno, key, value) in kv_lines(text)? {
            if cfg.train.apply_key(key, value, lineno)? {
                continue;
            }
            let bad =
                |what: &str| Error::Config(format!("line {lineno}: bad {what} value {value:?}"));
            match key {
                "use_doam" => cfg.use_doam = value.parse().map_err(|_| bad("use_doam"))?,
                "conf_thresh" => {
                    cfg.decode.conf_thresh = value.parse().map_err(|_| bad("conf_thresh"))?
                }
                "nms_iou" => cfg.decode.nms_iou = value.parse().map_err(|_| bad("nms_iou"))?,
                "top_k" => cfg.decode.top_k = value.parse().map_err(|_| bad("top_k"))?,
                "eval_iou" => cfg.eval_iou = value.parse().map_err(|_| bad("eval_iou"))?,
                "doam_blocks" => {
                    cfg.dims.doam_blocks = value.parse().map_err(|_| bad("doam_blocks"))?
                }
                "doam_channels" => {
                    cfg.dims.doam_channels = value.parse().map_err(|_| bad("doam_channels"))?
                }
                "region_scales" => cfg.dims.region_scales = parse_list(value, lineno, key)?,
                "backbone_channels" => {
                    cfg.dims.backbone_channels = parse_list(value, lineno, key)?
                }
                "head_blocks" => cfg.dims.head_blocks = parse_list(value, lineno, key)?,
                "image_size" => {
                    let side = value.parse().map_err(|_| bad("image_size"))?;
                    cfg.synth.image_size = (side, side);
                }
                "train_images" => {
                    cfg.synth.train_images = value.parse().map_err(|_| bad("train_images"))?
                }
                "test_images" => {
                    cfg.synth.test_images = value.parse().map_err(|_| bad("test_images"))?
                }
                "occlusion_density" => {
                    cfg.synth.occlusion_density =
                        value.parse().map_err(|_| bad("occlusion_density"))?
                }
                "target_size" => {
                    cfg.synth.target_size = value.parse().map_err(|_| bad("target_size"))?
                }
                "targets_per_image" => {
                    cfg.synth.targets_per_image =
                        value.parse().map_err(|_| bad("targets_per_image"))?
                }
                "clutter" => cfg.synth.clutter = value.parse().map_err(|_| bad("clutter"))?,
                "expected_preset" => {
                    cfg.expected_preset = match value {
                        "none" => None,
                        other => Some(other.to_string()),
                    }
                }
                other => {
                    return Err(Error::Config(format!("line {lineno}: unknown key {other:?}")))
                }
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_kv(&text)
    }

    /// Model architecture for `num_classes` foreground categories.
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let detector = DetectorConfig {
            in_channels: if self.use_doam { 4 } else { 3 },
            num_classes,
            channels: self.dims.backbone_channels.clone(),
            head_blocks: self.dims.head_blocks.clone(),
            ..DetectorConfig::default()
        };
        let doam = self.use_doam.then(|| DoamConfig {
            input_channels: 3,
            edge_blocks: self.dims.doam_blocks,
            material_blocks: self.dims.doam_blocks,
            edge_channels: self.dims.doam_channels,
            material_channels: self.dims.doam_channels,
            region_scales: self.dims.region_scales.clone(),
            with_norm: true,
        });
        ModelConfig { doam, detector }
    }

    fn build_model(&self, num_classes: usize, init_seed: u64) -> Result<DetectionModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        DetectionModel::init(&mut rng, self.model_config(num_classes))
    }

    fn load_model(&self, num_classes: usize, checkpoint: &Path) -> Result<DetectionModel> {
        let mut model = self.build_model(num_classes, 0)?;
        let archive = Archive::load(checkpoint)?;
        load_model_state(&mut model, &archive)?;
        Ok(model)
    }
}

/// Generates the synthetic dataset under `data_root`.
pub fn cmd_generate_data(config: &AppConfig, data_root: &Path, seed: u64) -> Result<SynthOutput> {
    generate_synthetic(data_root, &config.synth, seed)
}

/// Summary row written to `metrics.json` after training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub strategy: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_mean_batch_loss: f64,
    pub total_steps: usize,
    pub total_replays: usize,
}

/// Everything `cmd_train` leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub metrics: TrainMetrics,
    /// Path of the final checkpoint.
    pub checkpoint: PathBuf,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains on the `train` split under `data_root`, writing one checkpoint
/// per epoch, a JSON-lines batch report, and a final metrics JSON into
/// `out_dir`.
pub fn cmd_train(
    config: &AppConfig,
    data_root: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<TrainOutcome> {
    let (records, manifest) = load_dataset(data_root, Split::Train)?;
    let samples = to_samples(&records, &manifest.classes)?;
    let model = config.build_model(manifest.classes.len(), seed)?;
    let mut trainer = Trainer::new(model, config.train.clone(), seed)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut reports = Vec::with_capacity(config.train.epochs);
    let mut report_lines = Vec::new();
    for epoch in 0..config.train.epochs {
        let report = trainer.train_epoch(&samples, epoch)?;
        write_report_lines(&mut report_lines, &report.records)?;
        let archive = model_to_archive(&trainer.model);
        archive.save(&out_dir.join(format!("checkpoint_epoch_{epoch:03}.ckpt")))?;
        reports.push(report);
    }
    write_file(&out_dir.join("train_report.jsonl"), &report_lines)?;

    let checkpoint = out_dir.join("checkpoint_final.ckpt");
    model_to_archive(&trainer.model).save(&checkpoint)?;

    let last = reports.last().expect("at least one epoch");
    let metrics = TrainMetrics {
        strategy: config.train.strategy.to_string(),
        seed,
        epochs: reports.len(),
        final_mean_batch_loss: last.mean_batch_loss,
        total_steps: reports.iter().map(|r| r.steps).sum(),
        total_replays: reports.iter().map(|r| r.replay_count()).sum(),
    };
    write_file(
        &out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?.as_bytes(),
    )?;
    Ok(TrainOutcome {
        reports,
        metrics,
        checkpoint,
    })
}

/// Runs the model over `records`, decoding per-image detections.
pub fn run_inference(
    model: &DetectionModel,
    records: &[ImageRecord],
    classes: &[String],
    decode: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let per_image: Vec<Result<Vec<Detection>>> = parallel::map_indexed(records.len(), |i| {
        let rec = &records[i];
        let image = load_image_chw(&rec.image_path)?;
        let (_, h, w) = image.dim();
        let (out, _) = model.forward(&image, Mode::Eval)?;
        let anchors = model.anchors(h, w);
        let raw = decode_predictions(&out, &anchors, (h, w), decode)?;
        raw.into_iter()
            .map(|d| {
                Ok(Detection {
                    image_id: rec.image_id.clone(),
                    category: crate::data::Category::new(classes[d.category].clone())?,
                    bbox: d.bbox,
                    confidence: d.confidence,
                })
            })
            .collect()
    });
    let mut dets = Vec::new();
    for group in per_image {
        dets.extend(group?);
    }
    Ok(dets)
}

/// Evaluates a checkpoint on the `test` split, writing `detections.jsonl`
/// and `eval_report.json` into `out_dir`.
pub fn cmd_evaluate(
    config: &AppConfig,
    data_root: &Path,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    let (records, manifest) = load_dataset(data_root, Split::Test)?;
    let model = config.load_model(manifest.classes.len(), checkpoint)?;
    let dets = run_inference(&model, &records, &manifest.classes, &config.decode)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut det_lines = Vec::new();
    write_detections(&mut det_lines, &dets)?;
    write_file(&out_dir.join("detections.jsonl"), &det_lines)?;

    let grouped = records
        .iter()
        .any(|r| r.occlusion_level != OcclusionLevel::Unknown);
    let group_by = if grouped {
        GroupBy::OcclusionLevel
    } else {
        GroupBy::Category
    };
    let report = evaluate(&dets, &records, group_by, config.eval_iou)?;
    write_file(
        &out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}

/// Renders input / edge / attention-overlay PNGs for every test image.
pub fn cmd_viz_attention(
    config: &AppConfig,
    data_root: &Path,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (records, manifest) = load_dataset(data_root, Split::Test)?;
    let model = config.load_model(manifest.classes.len(), checkpoint)?;
    let doam = model.doam.as_ref().ok_or_else(|| Error::InvalidArgument {
        op: "viz-attention",
        reason: "model has no attention front-end (use_doam=false)".into(),
    })?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let rendered: Vec<Result<Vec<(PathBuf, Vec<u8>)>>> =
        parallel::map_indexed(records.len(), |i| {
            let rec = &records[i];
            let image = load_image_chw(&rec.image_path)?;
            let viz = attention_viz(doam, &image)?;
            Ok(vec![
                (
                    out_dir.join(format!("{}_input.png", rec.image_id)),
                    rgb_png_bytes(&viz.input)?,
                ),
                (
                    out_dir.join(format!("{}_edge.png", rec.image_id)),
                    gray_png_bytes(&viz.edge)?,
                ),
                (
                    out_dir.join(format!("{}_overlay.png", rec.image_id)),
                    rgb_png_bytes(&viz.overlay)?,
                ),
            ])
        });
    let mut paths = Vec::new();
    for group in rendered {
        for (path, bytes) in group? {
            write_file(&path, &bytes)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Renders Grad-CAM maps (gray) and their overlays for every test image.
pub fn cmd_viz_gradcam(
    config: &AppConfig,
    data_root: &Path,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let (records, manifest) = load_dataset(data_root, Split::Test)?;
    let model = config.load_model(manifest.classes.len(), checkpoint)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let rendered: Vec<Result<Vec<(PathBuf, Vec<u8>)>>> =
        parallel::map_indexed(records.len(), |i| {
            let rec = &records[i];
            let image = load_image_chw(&rec.image_path)?;
            let cam = grad_cam(&model, &image)?;
            Ok(vec![
                (
                    out_dir.join(format!("{}_cam.png", rec.image_id)),
                    gray_png_bytes(&cam)?,
                ),
                (
                    out_dir.join(format!("{}_cam_overlay.png", rec.image_id)),
                    rgb_png_bytes(&overlay(&image, &cam)?)?,
                ),
            ])
        });
    let mut paths = Vec::new();
    for group in rendered {
        for (path, bytes) in group? {
            write_file(&path, &bytes)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// What `validate-dataset` found.
#[derive(Debug)]
pub struct DatasetSummary {
    pub manifests: Vec<DatasetManifest>,
    /// Mismatch report against `expected_preset`, when one is configured.
    pub report: Option<ValidationReport>,
}

fn preset(name: &str) -> Result<ExpectedDistribution> {
    match name {
        "xray-train" => Ok(ExpectedDistribution::xray_train()),
        "xray-test" => Ok(ExpectedDistribution::xray_test()),
        "xray-combined" => Ok(ExpectedDistribution::xray_combined()),
        other => Err(Error::Config(format!(
            "unknown expected_preset {other:?} (xray-train, xray-test, xray-combined)"
        ))),
    }
}

/// Merges the two split manifests for combined-distribution checks: image
/// and instance counts add; the occlusion table comes from the test split.
fn merge_manifests(train: &DatasetManifest, test: &DatasetManifest) -> DatasetManifest {
    let mut per_category = train.per_category.clone();
    for (cat, count) in &test.per_category {
        *per_category.entry(cat.clone()).or_insert(0) += count;
    }
    DatasetManifest {
        split: Split::Train,
        num_images: train.num_images + test.num_images,
        classes: train.classes.clone(),
        per_category,
        per_level: test.per_level.clone(),
        resolution: if train.resolution == test.resolution {
            train.resolution
        } else {
            None
        },
    }
}

/// Loads whichever splits exist under `data_root` (at least one must) and
/// optionally validates their distribution against the configured preset.
pub fn cmd_validate_dataset(config: &AppConfig, data_root: &Path) -> Result<DatasetSummary> {
    let mut train = None;
    let mut test = None;
    if data_root.join(Split::Train.dir_name()).is_dir() {
        train = Some(load_dataset(data_root, Split::Train)?.1);
    }
    if data_root.join(Split::Test.dir_name()).is_dir() {
        test = Some(load_dataset(data_root, Split::Test)?.1);
    }
    if train.is_none() && test.is_none() {
        return Err(Error::Dataset(format!(
            "no train/ or test/ split under {data_root:?}"
        )));
    }

    let report = match config.expected_preset.as_deref() {
        None => None,
        Some(name) => {
            let expected = preset(name)?;
            let manifest = match name {
                "xray-train" => train.clone().ok_or_else(|| {
                    Error::Dataset("preset xray-train needs a train/ split".into())
                })?,
                "xray-test" => test
                    .clone()
                    .ok_or_else(|| Error::Dataset("preset xray-test needs a test/ split".into()))?,
                _ => match (&train, &test) {
                    (Some(tr), Some(te)) => merge_manifests(tr, te),
                    _ => {
                        return Err(Error::Dataset(
                            "preset xray-combined needs both splits".into(),
                        ))
                    }
                },
            };
            Some(validate_distribution(&manifest, &expected))
        }
    };
    Ok(DatasetSummary {
        manifests: train.into_iter().chain(test).collect(),
        report,
    })
}

/// Builds the configured model and reports its parameter/FLOP accounting;
/// writes `complexity.json` when `out_dir` is given.
pub fn cmd_complexity(
    config: &AppConfig,
    num_classes: usize,
    out_dir: Option<&Path>,
) -> Result<ComplexityReport> {
    let model = config.build_model(num_classes, 0)?;
    let report = complexity_report(&model, config.synth.image_size)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(
            &dir.join("complexity.json"),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Strategy;
    use tempfile::TempDir;

    /// Small-but-real config: 16×16 images, compact model.
    fn desk_config() -> AppConfig {
        let mut cfg = AppConfig::parse_kv(
            "image_size=16\ntrain_images=8\ntest_images=4\ntarget_size=6\n\
             doam_blocks=1\ndoam_channels=4\nregion_scales=3,5\n\
             backbone_channels=6,8\nhead_blocks=1\n\
             batch_size=4\nepochs=1\nstrategy=none\nlearning_rate=0.001",
        )
        .unwrap();
        cfg.synth.clutter = 1;
        cfg
    }

    fn generated(cfg: &AppConfig) -> TempDir {
        let dir = TempDir::new().unwrap();
        cmd_generate_data(cfg, dir.path(), 77).unwrap();
        dir
    }

    #[test]
    fn config_file_round_trips_the_extended_keys() {
        let cfg = desk_config();
        assert_eq!(cfg.synth.image_size, (16, 16));
        assert_eq!(cfg.dims.backbone_channels, vec![6, 8]);
        assert_eq!(cfg.dims.head_blocks, vec![1]);
        assert_eq!(cfg.train.batch_size, 4);
        assert!(cfg.use_doam);
        // Unknown keys are refused with their line number.
        let err = AppConfig::parse_kv("epochs=2\nbogus=1").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        // Trainer keys and command keys share one file.
        let both = AppConfig::parse_kv("strategy=focal\nconf_thresh=0.2").unwrap();
        assert_eq!(both.train.strategy, Strategy::Focal);
        assert_eq!(both.decode.conf_thresh, 0.2);
    }

    #[test]
    fn train_writes_reports_checkpoints_and_metrics() {
        let cfg = desk_config();
        let data = generated(&cfg);
        let out = TempDir::new().unwrap();
        let outcome = cmd_train(&cfg, data.path(), out.path(), 11).unwrap();
        assert_eq!(outcome.reports.len(), 1);
        assert_eq!(outcome.metrics.total_replays, 0);
        assert!(outcome.checkpoint.is_file());
        assert!(out.path().join("checkpoint_epoch_000.ckpt").is_file());
        assert!(out.path().join("metrics.json").is_file());
        let lines = std::fs::read_to_string(out.path().join("train_report.jsonl")).unwrap();
        // 8 images / batch 4 = 2 normal rows, no replays.
        assert_eq!(lines.lines().count(), 2);
    }

    #[test]
    fn identical_config_and_seed_give_byte_identical_checkpoints() {
        let cfg = desk_config();
        let data = generated(&cfg);
        let (out_a, out_b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        let a = cmd_train(&cfg, data.path(), out_a.path(), 21).unwrap();
        let b = cmd_train(&cfg, data.path(), out_b.path(), 21).unwrap();
        let bytes_a = std::fs::read(&a.checkpoint).unwrap();
        let bytes_b = std::fs::read(&b.checkpoint).unwrap();
        assert_eq!(bytes_a, bytes_b);
        // A different seed trains a different model.
        let out_c = TempDir::new().unwrap();
        let c = cmd_train(&cfg, data.path(), out_c.path(), 22).unwrap();
        assert_ne!(bytes_a, std::fs::read(&c.checkpoint).unwrap());
    }

    #[test]
    fn hard_strategy_replays_while_none_does_not() {
        let mut cfg = desk_config();
        let data = generated(&cfg);
        let out_none = TempDir::new().unwrap();
        let none = cmd_train(&cfg, data.path(), out_none.path(), 31).unwrap();
        assert_eq!(none.metrics.total_replays, 0);

        cfg.train.strategy = Strategy::Hard;
        cfg.train.threshold = crate::train::Threshold::Fixed(f64::NEG_INFINITY);
        let out_hard = TempDir::new().unwrap();
        let hard = cmd_train(&cfg, data.path(), out_hard.path(), 31).unwrap();
        assert!(hard.metrics.total_replays > 0);
    }

    #[test]
    fn evaluate_emits_detections_and_a_level_grouped_report() {
        let cfg = desk_config();
        let data = generated(&cfg);
        let out = TempDir::new().unwrap();
        let outcome = cmd_train(&cfg, data.path(), out.path(), 41).unwrap();
        let eval_out = TempDir::new().unwrap();
        let report =
            cmd_evaluate(&cfg, data.path(), &outcome.checkpoint, eval_out.path()).unwrap();
        assert!((0.0..=1.0).contains(&report.map));
        assert!(eval_out.path().join("detections.jsonl").is_file());
        assert!(eval_out.path().join("eval_report.json").is_file());
        // Synthetic test split is level-partitioned, so grouping kicks in
        // and every key is one of the three levels.
        let levels = report.per_level.expect("level-grouped");
        assert!(!levels.is_empty());
        for key in levels.keys() {
            assert!(["OL1", "OL2", "OL3"].contains(&key.as_str()), "{key}");
        }
    }

    #[test]
    fn viz_commands_write_deterministic_pngs() {
        let cfg = desk_config();
        let data = generated(&cfg);
        let out = TempDir::new().unwrap();
        let outcome = cmd_train(&cfg, data.path(), out.path(), 51).unwrap();

        let viz_a = TempDir::new().unwrap();
        let paths = cmd_viz_attention(&cfg, data.path(), &outcome.checkpoint, viz_a.path())
            .unwrap();
        // input / edge / overlay per test image.
        assert_eq!(paths.len(), 3 * 4);
        assert!(paths.iter().all(|p| p.is_file()));

        let viz_b = TempDir::new().unwrap();
        let again = cmd_viz_attention(&cfg, data.path(), &outcome.checkpoint, viz_b.path())
            .unwrap();
        for (a, b) in paths.iter().zip(&again) {
            assert_eq!(
                std::fs::read(a).unwrap(),
                std::fs::read(b).unwrap(),
                "regeneration must be byte-identical"
            );
        }

        let cam_out = TempDir::new().unwrap();
        let cams =
            cmd_viz_gradcam(&cfg, data.path(), &outcome.checkpoint, cam_out.path()).unwrap();
        assert_eq!(cams.len(), 2 * 4);
        assert!(cams.iter().all(|p| p.is_file()));
    }

    #[test]
    fn validate_dataset_checks_presets_and_structure() {
        let cfg = desk_config();
        let data = generated(&cfg);
        let summary = cmd_validate_dataset(&cfg, data.path()).unwrap();
        assert_eq!(summary.manifests.len(), 2);
        assert!(summary.report.is_none());

        // The synthetic counts do not match the X-ray presets; the report
        // must say so rather than error.
        let mut strict = cfg.clone();
        strict.expected_preset = Some("xray-train".into());
        let checked = cmd_validate_dataset(&strict, data.path()).unwrap();
        assert!(!checked.report.unwrap().is_ok());

        let missing = cmd_validate_dataset(&cfg, Path::new("/nonexistent/nowhere"));
        assert!(missing.is_err());

        let mut bogus = cfg;
        bogus.expected_preset = Some("mystery".into());
        let err = cmd_validate_dataset(&bogus, data.path()).unwrap_err();
        assert!(err.to_string().contains("expected_preset"), "{err}");
    }

    #[test]
    fn complexity_reports_both_model_variants() {
        let mut cfg = desk_config();
        let with = cmd_complexity(&cfg, 5, None).unwrap();
        assert!(with.front_end.is_some());
        assert!(with.params > 0);

        cfg.use_doam = false;
        let out = TempDir::new().unwrap();
        let without = cmd_complexity(&cfg, 5, Some(out.path())).unwrap();
        assert!(without.front_end.is_none());
        assert!(without.params < with.params);
        assert!(out.path().join("complexity.json").is_file());
    }
}
