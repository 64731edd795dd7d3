//! `doam` — synthetic-data generation, training, evaluation, and
//! visualization for the occlusion-aware detection pipeline.
//!
//! Every command exits 0 on success and nonzero with a single
//! `error: <message>` line on stderr otherwise.

use clap::{Args, Parser, Subcommand};
use doam::commands::{
    cmd_complexity, cmd_evaluate, cmd_generate_data, cmd_train, cmd_validate_dataset,
    cmd_viz_attention, cmd_viz_gradcam, AppConfig,
};
use doam::error::{Error, Result};
use doam::train::Strategy;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "doam", version, about = "Occlusion-aware detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each command validates the subset it
/// actually needs.
#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// RNG seed; required by generate-data and train.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Dataset root holding train/ and/or test/ splits.
    #[arg(long, value_name = "PATH")]
    data_root: Option<PathBuf>,
    /// Model checkpoint to load.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Over-sampling strategy override.
    #[arg(long, value_name = "STRATEGY")]
    strategy: Option<Strategy>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset under --out.
    GenerateData(Common),
    /// Train on the train/ split of --data-root, writing artifacts to --out.
    Train(Common),
    /// Evaluate --checkpoint on the test/ split of --data-root.
    Evaluate(Common),
    /// Export input / edge / attention-overlay PNGs for the test split.
    VizAttention(Common),
    /// Export Grad-CAM PNGs for the test split.
    VizGradcam(Common),
    /// Check dataset structure, and its distribution when the config names
    /// an expected_preset.
    ValidateDataset(Common),
    /// Report parameter counts and FLOPs for the configured model.
    Complexity(Common),
}

impl Common {
    fn config(&self) -> Result<AppConfig> {
        let mut cfg = match &self.config {
            Some(path) => AppConfig::from_file(path)?,
            None => AppConfig::default(),
        };
        if let Some(strategy) = self.strategy {
            cfg.train.strategy = strategy;
        }
        Ok(cfg)
    }

    fn need(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        path.clone().ok_or_else(|| Error::InvalidArgument {
            op: "cli",
            reason: format!("--{flag} is required for this command"),
        })
    }

    fn need_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::InvalidArgument {
            op: "cli",
            reason: "--seed is required for this command".into(),
        })
    }
}

/// Prints a status line, ignoring a closed pipe (e.g. `doam … | head`).
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenerateData(args) => {
            let cfg = args.config()?;
            let out = Common::need(&args.out, "out")?;
            let output = cmd_generate_data(&cfg, &out, args.need_seed()?)?;
            emit!(
                "generated {} train + {} test images under {}",
                output.train_manifest.num_images,
                output.test_manifest.num_images,
                out.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.config()?;
            let data_root = Common::need(&args.data_root, "data-root")?;
            let out = Common::need(&args.out, "out")?;
            let outcome = cmd_train(&cfg, &data_root, &out, args.need_seed()?)?;
            emit!(
                "trained {} epochs (strategy {}, {} steps, {} replays); final mean batch loss {:.6}; checkpoint {}",
                outcome.metrics.epochs,
                outcome.metrics.strategy,
                outcome.metrics.total_steps,
                outcome.metrics.total_replays,
                outcome.metrics.final_mean_batch_loss,
                outcome.checkpoint.display()
            );
        }
        Command::Evaluate(args) => {
            let cfg = args.config()?;
            let data_root = Common::need(&args.data_root, "data-root")?;
            let checkpoint = Common::need(&args.checkpoint, "checkpoint")?;
            let out = Common::need(&args.out, "out")?;
            let report = cmd_evaluate(&cfg, &data_root, &checkpoint, &out)?;
            emit!("mAP@{} = {:.4}", report.iou_thresh, report.map);
            if let Some(levels) = &report.per_level {
                for (level, map) in levels {
                    emit!("{level} mAP = {map:.4}");
                }
            }
        }
        Command::VizAttention(args) => {
            let cfg = args.config()?;
            let data_root = Common::need(&args.data_root, "data-root")?;
            let checkpoint = Common::need(&args.checkpoint, "checkpoint")?;
            let out = Common::need(&args.out, "out")?;
            let paths = cmd_viz_attention(&cfg, &data_root, &checkpoint, &out)?;
            emit!("wrote {} images to {}", paths.len(), out.display());
        }
        Command::VizGradcam(args) => {
            let cfg = args.config()?;
            let data_root = Common::need(&args.data_root, "data-root")?;
            let checkpoint = Common::need(&args.checkpoint, "checkpoint")?;
            let out = Common::need(&args.out, "out")?;
            let paths = cmd_viz_gradcam(&cfg, &data_root, &checkpoint, &out)?;
            emit!("wrote {} images to {}", paths.len(), out.display());
        }
        Command::ValidateDataset(args) => {
            let cfg = args.config()?;
            let data_root = Common::need(&args.data_root, "data-root")?;
            let summary = cmd_validate_dataset(&cfg, &data_root)?;
            for manifest in &summary.manifests {
                emit!(
                    "{}: {} images, {} instances across {} classes",
                    manifest.split.dir_name(),
                    manifest.num_images,
                    manifest.num_instances(),
                    manifest.classes.len()
                );
            }
            if let Some(report) = &summary.report {
                if report.is_ok() {
                    emit!("distribution matches the configured preset");
                } else {
                    let detail: Vec<String> = report
                        .mismatches
                        .iter()
                        .map(|m| {
                            format!("{}: expected {}, actual {}", m.field, m.expected, m.actual)
                        })
                        .collect();
                    return Err(Error::Dataset(format!(
                        "distribution mismatches: {}",
                        detail.join("; ")
                    )));
                }
            }
        }
        Command::Complexity(args) => {
            let cfg = args.config()?;
            let report = cmd_complexity(&cfg, 5, args.out.as_deref())?;
            emit!("{}", serde_json::to_string_pretty(&report).map_err(Error::Json)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // One line, machine-parseable: everything after "error: ".
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
