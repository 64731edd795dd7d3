//! End-to-end detection model: an optional attention front end feeding the
//! SSD-style detector.
//!
//! With the front end enabled the detector consumes the refined `C+1`
//! channel map (attention-weighted image plus edge channel); without it the
//! detector reads the raw image. Parameter names form one flat dotted
//! namespace: the front end publishes `eg.*`, `ma.*`, `ag.*`, the detector
//! `backbone.*` and `head*.{loc,conf}.*`.

use crate::detector::{Anchor, Detector, DetectorCache, DetectorConfig, DetectorGrads, DetectorOutput};
use crate::doam::{DoamCache, DoamConfig, DoamGrads, DoamModule};
use crate::error::{Error, Result};
use crate::nn::{Mode, NamedViews, NamedViewsMut};
use ndarray::Array3;
use rand::Rng;

/// Full-model configuration.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Attention front end; `None` runs the bare detector.
    pub doam: Option<DoamConfig>,
    pub detector: DetectorConfig,
}

impl ModelConfig {
    /// Detector over the attention front end with the given class count.
    pub fn with_doam(num_classes: usize) -> Self {
        let doam = DoamConfig::default();
        let detector = DetectorConfig {
            in_channels: doam.input_channels + 1,
            num_classes,
            ..DetectorConfig::default()
        };
        ModelConfig {
            doam: Some(doam),
            detector,
        }
    }

    /// Bare detector on raw 3-channel images.
    pub fn detector_only(num_classes: usize) -> Self {
        ModelConfig {
            doam: None,
            detector: DetectorConfig {
                in_channels: 3,
                num_classes,
                ..DetectorConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(doam) = &self.doam {
            doam.validate()?;
            let expected = doam.input_channels + 1;
            if self.detector.in_channels != expected {
                return Err(Error::InvalidArgument {
                    op: "ModelConfig::validate",
                    reason: format!(
                        "detector expects {} input channels but the front end emits {}",
                        self.detector.in_channels, expected
                    ),
                });
            }
        }
        self.detector.validate()
    }
}

/// Optional attention front end plus detector.
#[derive(Debug, Clone)]
pub struct DetectionModel {
    pub doam: Option<DoamModule>,
    pub detector: Detector,
}

/// Forward activations needed by [`DetectionModel::backward`].
#[derive(Debug, Clone)]
pub struct ModelCache {
    pub doam: Option<DoamCache>,
    pub detector: DetectorCache,
}

/// Gradients for every parameter of the model.
#[derive(Debug)]
pub struct ModelGrads {
    pub doam: Option<DoamGrads>,
    pub detector: DetectorGrads,
}

impl ModelGrads {
    pub fn named_views(&self) -> NamedViews<'_> {
        let mut v = match &self.doam {
            Some(g) => g.named_views(""),
            None => Vec::new(),
        };
        v.extend(self.detector.named_views(""));
        v
    }
}

impl DetectionModel {
    pub fn init<R: Rng>(rng: &mut R, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let doam = match config.doam {
            Some(cfg) => Some(DoamModule::init(rng, cfg)?),
            None => None,
        };
        let detector = Detector::init(rng, config.detector)?;
        Ok(DetectionModel { doam, detector })
    }

    /// Anchors of the detector at the given image size.
    pub fn anchors(&self, h: usize, w: usize) -> Vec<Anchor> {
        self.detector.anchors(h, w)
    }

    pub fn num_classes(&self) -> usize {
        self.detector.config.num_classes
    }

    pub fn forward(&self, x: &Array3<f64>, mode: Mode) -> Result<(DetectorOutput, ModelCache)> {
        match &self.doam {
            Some(doam) => {
                let (refined, doam_cache) = doam.forward(x, mode)?;
                let (out, det_cache) = self.detector.forward(&refined, mode)?;
                Ok((
                    out,
                    ModelCache {
                        doam: Some(doam_cache),
                        detector: det_cache,
                    },
                ))
            }
            None => {
                let (out, det_cache) = self.detector.forward(x, mode)?;
                Ok((
                    out,
                    ModelCache {
                        doam: None,
                        detector: det_cache,
                    },
                ))
            }
        }
    }

    /// Backpropagates loss gradients through the detector and (when
    /// present) the front end. The gradient with respect to the input image
    /// is discarded.
    pub fn backward(
        &self,
        cache: &ModelCache,
        grad_loc: &ndarray::Array2<f64>,
        grad_conf: &ndarray::Array2<f64>,
    ) -> ModelGrads {
        let (grad_features, det_grads) = self.detector.backward(&cache.detector, grad_loc, grad_conf);
        let doam_grads = match (&self.doam, &cache.doam) {
            (Some(doam), Some(doam_cache)) => {
                let (_grad_input, grads) = doam.backward(doam_cache, &grad_features);
                Some(grads)
            }
            _ => None,
        };
        ModelGrads {
            doam: doam_grads,
            detector: det_grads,
        }
    }

    /// Folds the batch statistics recorded in `cache` into the running
    /// normalization buffers.
    pub fn absorb_stats(&mut self, cache: &ModelCache, momentum: f64) {
        if let (Some(doam), Some(doam_cache)) = (&mut self.doam, &cache.doam) {
            doam.absorb_stats(doam_cache, momentum);
        }
        self.detector.absorb_stats(&cache.detector, momentum);
    }

    pub fn named_params(&self) -> NamedViews<'_> {
        let mut v = match &self.doam {
            Some(d) => d.named_params(""),
            None => Vec::new(),
        };
        v.extend(self.detector.named_params(""));
        v
    }

    pub fn named_params_mut(&mut self) -> NamedViewsMut<'_> {
        let mut v = match &mut self.doam {
            Some(d) => d.named_params_mut(""),
            None => Vec::new(),
        };
        v.extend(self.detector.named_params_mut(""));
        v
    }

    pub fn named_buffers(&self) -> NamedViews<'_> {
        let mut v = match &self.doam {
            Some(d) => d.named_buffers(""),
            None => Vec::new(),
        };
        v.extend(self.detector.named_buffers(""));
        v
    }

    pub fn named_buffers_mut(&mut self) -> NamedViewsMut<'_> {
        let mut v = match &mut self.doam {
            Some(d) => d.named_buffers_mut(""),
            None => Vec::new(),
        };
        v.extend(self.detector.named_buffers_mut(""));
        v
    }

    pub fn param_count(&self) -> usize {
        self.doam.as_ref().map_or(0, |d| d.param_count()) + self.detector.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_input(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 48, 48), |_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
    }

    #[test]
    fn forward_runs_with_and_without_the_front_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let with = DetectionModel::init(&mut rng, ModelConfig::with_doam(5)).unwrap();
        let without = DetectionModel::init(&mut rng, ModelConfig::detector_only(5)).unwrap();
        let x = sample_input(1);
        let (out_with, cache) = with.forward(&x, Mode::Eval).unwrap();
        let (out_without, _) = without.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out_with.loc.dim(), out_without.loc.dim());
        assert!(cache.doam.is_some());
        // The combined namespace covers both components without collisions.
        let names: Vec<String> = with.named_params().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::BTreeSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(names.iter().any(|n| n.starts_with("eg.block0.")));
        assert!(names.iter().any(|n| n.starts_with("backbone.block0.")));
    }

    #[test]
    fn mismatched_front_end_and_detector_channels_are_rejected() {
        let mut cfg = ModelConfig::with_doam(5);
        cfg.detector.in_channels = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_is_the_sum_of_both_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ModelConfig::with_doam(5);
        let doam_count = cfg.doam.as_ref().unwrap().param_count_closed_form();
        let det_count = cfg.detector.param_count_closed_form();
        let model = DetectionModel::init(&mut rng, cfg).unwrap();
        assert_eq!(model.param_count(), doam_count + det_count);
        let enumerated: usize = model
            .named_params()
            .iter()
            .map(|(_, view)| view.len())
            .sum();
        assert_eq!(enumerated, doam_count + det_count);
    }

    #[test]
    fn backward_produces_a_gradient_for_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = DetectionModel::init(&mut rng, ModelConfig::with_doam(5)).unwrap();
        let x = sample_input(2);
        let (out, cache) = model.forward(&x, Mode::Train).unwrap();
        let grad_loc = ndarray::Array2::from_elem(out.loc.dim(), 1e-3);
        let grad_conf = ndarray::Array2::from_elem(out.conf.dim(), 1e-3);
        let grads = model.backward(&cache, &grad_loc, &grad_conf);
        let param_names: Vec<String> =
            model.named_params().into_iter().map(|(n, _)| n).collect();
        let grad_names: Vec<String> =
            grads.named_views().into_iter().map(|(n, _)| n).collect();
        assert_eq!(param_names, grad_names);
    }
}
