//! Training loop with batch-replay over-sampling.
//!
//! Every batch takes its normal gradient step; the pool is bookkeeping on
//! top. Depending on the strategy, batches whose loss strictly exceeds
//! (hard) or undercuts (easy) the threshold are pooled, or a uniform random
//! subset is pooled at epoch end. When the epoch's batches are done, each
//! pooled batch is replayed exactly once — a fresh forward/backward/step at
//! the current parameters, pool frozen so replay losses cannot re-enter —
//! and the pool is cleared. The focal strategy replaces the mined
//! cross-entropy confidence loss instead of pooling anything.

mod config;
mod pool;

pub use config::{kv_lines, Strategy, Threshold, TrainConfig};
pub use pool::{pool_fill_random, HardSamplePool, PoolEntry};

pub use crate::detector::focal_loss;

use crate::data::{load_image_chw, ImageRecord};
use crate::detector::{detection_loss, ConfLoss, LossPair, Target};
use crate::error::{Error, Result};
use crate::nn::{Mode, NamedViews, Sgd};
use crate::pipeline::DetectionModel;
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// One training example: a channels-first image in [0, 1] and its targets
/// in normalized coordinates.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: ndarray::Array3<f64>,
    pub targets: Vec<Target>,
}

/// Converts dataset records into training samples, loading images from
/// disk and mapping category names to indices in `classes` order.
pub fn to_samples(records: &[ImageRecord], classes: &[String]) -> Result<Vec<TrainSample>> {
    records
        .iter()
        .map(|rec| {
            let image = load_image_chw(&rec.image_path)?;
            let (w, h) = (rec.width as f64, rec.height as f64);
            let targets = rec
                .annotations
                .iter()
                .map(|ann| {
                    let category = classes
                        .iter()
                        .position(|c| c == ann.category.name())
                        .ok_or_else(|| {
                            Error::Dataset(format!(
                                "category {:?} of image {} not in class list {:?}",
                                ann.category.name(),
                                rec.image_id,
                                classes
                            ))
                        })?;
                    Ok(Target {
                        category,
                        bbox: crate::geom::Box2D::new(
                            ann.bbox.x1 / w,
                            ann.bbox.y1 / h,
                            ann.bbox.x2 / w,
                            ann.bbox.y2 / h,
                        ),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainSample { image, targets })
        })
        .collect()
}

/// Mean total loss of one batch: `L_i = Σ (loc + conf) / n`.
pub fn batch_loss(losses: &[LossPair]) -> f64 {
    assert!(!losses.is_empty(), "batch_loss needs at least one sample");
    losses.iter().map(|p| p.loc + p.conf).sum::<f64>() / losses.len() as f64
}

/// One report row. Normal passes have `replayed = false`; `pooled` marks
/// batches that ended the epoch in the pool (and were therefore replayed).
/// Each replay emits an extra row with `replayed = true` carrying the
/// replay-time loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch_id: usize,
    #[serde(rename = "L_i")]
    pub loss: f64,
    pub pooled: bool,
    pub replayed: bool,
}

/// Everything observed during one epoch.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    /// Pool admission threshold used this epoch.
    pub threshold: f64,
    /// Normal rows then replay rows, each in batch order.
    pub records: Vec<BatchRecord>,
    /// Mean loss over the normal passes.
    pub mean_batch_loss: f64,
    /// Optimizer steps taken (normal + replay).
    pub steps: usize,
}

impl EpochReport {
    pub fn replay_count(&self) -> usize {
        self.records.iter().filter(|r| r.replayed).count()
    }
}

/// Writes records as JSON-lines.
pub fn write_report_lines<W: Write>(mut out: W, records: &[BatchRecord]) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec)?;
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io("<report stream>", e))?;
    }
    Ok(())
}

/// Reads JSON-lines records; blank lines are skipped.
pub fn read_report_lines<R: BufRead>(input: R) -> Result<Vec<BatchRecord>> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<report stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("report line {}: {e}", idx + 1)))?,
        );
    }
    Ok(records)
}

/// splitmix64-style mix of the run seed and a stream index, so shuffling,
/// random pooling, and other consumers draw from disjoint streams.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Owns the model, optimizer state, and replay bookkeeping across epochs.
#[derive(Debug)]
pub struct Trainer {
    pub model: DetectionModel,
    pub config: TrainConfig,
    optimizer: Sgd,
    seed: u64,
    /// Mean batch loss of the previous epoch, feeding `Threshold::Auto`.
    prev_epoch_mean: Option<f64>,
}

impl Trainer {
    pub fn new(model: DetectionModel, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
        Ok(Trainer {
            model,
            config,
            optimizer,
            seed,
            prev_epoch_mean: None,
        })
    }

    fn conf_loss_kind(&self) -> ConfLoss {
        match self.config.strategy {
            Strategy::Focal => ConfLoss::Focal {
                gamma: self.config.focal_gamma,
            },
            _ => ConfLoss::MinedCrossEntropy,
        }
    }

    /// Forward/backward over one batch, then one optimizer step. Returns
    /// the batch loss.
    fn run_batch(
        &mut self,
        samples: &[TrainSample],
        batch: &[usize],
        epoch: usize,
        batch_id: usize,
    ) -> Result<f64> {
        let kind = self.conf_loss_kind();
        let inv_n = 1.0 / batch.len() as f64;
        let mut acc: Option<Vec<(String, ArrayD<f64>)>> = None;
        let mut pairs = Vec::with_capacity(batch.len());
        for &idx in batch {
            let sample = &samples[idx];
            let (_, h, w) = sample.image.dim();
            let anchors = self.model.anchors(h, w);
            let (out, cache) = self.model.forward(&sample.image, Mode::Train)?;
            let (pair, grads) = detection_loss(&out, &anchors, &sample.targets, kind)?;
            let model_grads = self.model.backward(&cache, &grads.loc, &grads.conf);
            accumulate(&mut acc, model_grads.named_views(), inv_n);
            self.model.absorb_stats(&cache, self.config.norm_momentum);
            pairs.push(pair);
        }
        let loss = batch_loss(&pairs);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: batch_id,
                value: loss,
            });
        }
        let acc = acc.expect("batch is non-empty");
        let grad_views: Vec<(String, ndarray::ArrayViewD<'_, f64>)> =
            acc.iter().map(|(n, a)| (n.clone(), a.view())).collect();
        self.optimizer.step(self.model.named_params_mut(), &grad_views);
        Ok(loss)
    }

    /// Runs one epoch: shuffled batches, pool bookkeeping, epoch-end
    /// replay, pool cleared.
    pub fn train_epoch(&mut self, samples: &[TrainSample], epoch: usize) -> Result<EpochReport> {
        if samples.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let threshold = match self.config.threshold {
            Threshold::Fixed(v) => v,
            Threshold::Auto => self.prev_epoch_mean.unwrap_or(f64::INFINITY),
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, 2 * epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<Vec<usize>> = order
            .chunks(self.config.batch_size)
            .map(|c| c.to_vec())
            .collect();

        let mut pool = HardSamplePool::new(self.config.pool_capacity)?;
        let mut records = Vec::with_capacity(batches.len());
        let mut steps = 0usize;
        let mut loss_sum = 0.0;
        for (batch_id, batch) in batches.iter().enumerate() {
            let loss = self.run_batch(samples, batch, epoch, batch_id)?;
            steps += 1;
            loss_sum += loss;
            match self.config.strategy {
                Strategy::Hard => {
                    pool.update_hard(batch_id, batch.clone(), loss, threshold);
                }
                Strategy::Easy => {
                    pool.update_easy(batch_id, batch.clone(), loss, threshold);
                }
                Strategy::Random | Strategy::Focal | Strategy::None => {}
            }
            records.push(BatchRecord {
                epoch,
                batch_id,
                loss,
                pooled: false,
                replayed: false,
            });
        }

        if self.config.strategy == Strategy::Random {
            let all: Vec<PoolEntry> = batches
                .iter()
                .enumerate()
                .map(|(batch_id, batch)| PoolEntry {
                    batch_id,
                    sample_indices: batch.clone(),
                    loss: records[batch_id].loss,
                })
                .collect();
            pool = pool_fill_random(
                &all,
                self.config.pool_capacity,
                stream_seed(self.seed, 2 * epoch as u64 + 1),
            );
        }

        // Replay: one extra pass per pooled batch, pool frozen, then clear.
        let mut replay_entries: Vec<PoolEntry> = pool.entries().to_vec();
        replay_entries.sort_by_key(|e| e.batch_id);
        for entry in &replay_entries {
            records[entry.batch_id].pooled = true;
            let loss = self.run_batch(samples, &entry.sample_indices, epoch, entry.batch_id)?;
            steps += 1;
            records.push(BatchRecord {
                epoch,
                batch_id: entry.batch_id,
                loss,
                pooled: true,
                replayed: true,
            });
        }
        pool.clear();

        let mean_batch_loss = loss_sum / batches.len() as f64;
        self.prev_epoch_mean = Some(mean_batch_loss);
        Ok(EpochReport {
            epoch,
            threshold,
            records,
            mean_batch_loss,
            steps,
        })
    }

    /// Runs the configured number of epochs.
    pub fn train(&mut self, samples: &[TrainSample]) -> Result<Vec<EpochReport>> {
        (0..self.config.epochs)
            .map(|epoch| self.train_epoch(samples, epoch))
            .collect()
    }
}

/// Adds `scale`-weighted gradient views into the accumulator, initializing
/// it on the first call. Name order follows the model's parameter order.
fn accumulate(acc: &mut Option<Vec<(String, ArrayD<f64>)>>, views: NamedViews<'_>, scale: f64) {
    match acc {
        None => {
            *acc = Some(
                views
                    .into_iter()
                    .map(|(name, view)| (name, view.to_owned().mapv_into(|v| v * scale)))
                    .collect(),
            );
        }
        Some(entries) => {
            debug_assert_eq!(entries.len(), views.len());
            for ((name, sum), (vname, view)) in entries.iter_mut().zip(views) {
                debug_assert_eq!(*name, vname);
                sum.zip_mut_with(&view, |d, &s| *d += s * scale);
            }
        }
    }
}
