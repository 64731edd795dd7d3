//! Training configuration and its flat `key=value` file format.
//!
//! Recognized keys (all optional, defaults in parentheses):
//!
//! | key             | meaning                                            |
//! |-----------------|----------------------------------------------------|
//! | `strategy`      | `hard` \| `easy` \| `random` \| `focal` \| `none` (`hard`) |
//! | `threshold`     | `auto` or a float, `inf`/`-inf` allowed (`auto`)   |
//! | `pool_capacity` | pool size N_S in batches (`5`)                     |
//! | `batch_size`    | samples per batch n (`24`)                         |
//! | `focal_gamma`   | focusing exponent γ ≥ 0 (`2.0`)                    |
//! | `learning_rate` | SGD step size (`1e-4`)                             |
//! | `momentum`      | SGD momentum (`0.9`)                               |
//! | `weight_decay`  | L2 coefficient (`5e-4`)                            |
//! | `norm_momentum` | running-statistics update rate (`0.1`)             |
//! | `epochs`        | training epochs (`10`)                             |
//!
//! `threshold=auto` sets each epoch's pool threshold to the mean batch
//! loss of the previous epoch (+∞ for the first epoch, which disables the
//! pool until a scale is known). Lines may be blank or start with `#`.

use crate::error::{Error, Result};
use std::fmt;
use std::str::FromStr;

/// Which replay strategy drives the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Pool the highest-loss batches (strict threshold).
    Hard,
    /// Pool the lowest-loss batches.
    Easy,
    /// Pool a uniform random batch subset at epoch end.
    Random,
    /// No pool; per-anchor confidence loss becomes focal loss.
    Focal,
    /// Plain training, no pool and mined cross-entropy.
    None,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Strategy::Hard),
            "easy" => Ok(Strategy::Easy),
            "random" => Ok(Strategy::Random),
            "focal" => Ok(Strategy::Focal),
            "none" => Ok(Strategy::None),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected hard|easy|random|focal|none)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Hard => "hard",
            Strategy::Easy => "easy",
            Strategy::Random => "random",
            Strategy::Focal => "focal",
            Strategy::None => "none",
        })
    }
}

/// Pool admission threshold L.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Previous epoch's mean batch loss (+∞ on the first epoch).
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub threshold: Threshold,
    /// Pool capacity N_S in batches.
    pub pool_capacity: usize,
    /// Samples per batch n.
    pub batch_size: usize,
    pub focal_gamma: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Update rate folding per-forward statistics into running buffers.
    pub norm_momentum: f64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Hard,
            threshold: Threshold::Auto,
            pool_capacity: 5,
            batch_size: 24,
            focal_gamma: 2.0,
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            norm_momentum: 0.1,
            epochs: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let reason = if self.batch_size == 0 {
            Some("batch_size must be ≥ 1".to_string())
        } else if self.pool_capacity == 0 {
            Some("pool_capacity must be ≥ 1".to_string())
        } else if !(self.focal_gamma >= 0.0) {
            Some(format!("focal_gamma must be ≥ 0, got {}", self.focal_gamma))
        } else if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            Some(format!("learning_rate must be positive, got {}", self.learning_rate))
        } else if !(0.0..1.0).contains(&self.momentum) {
            Some(format!("momentum must be in [0, 1), got {}", self.momentum))
        } else if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            Some(format!("weight_decay must be ≥ 0, got {}", self.weight_decay))
        } else if !(0.0..=1.0).contains(&self.norm_momentum) {
            Some(format!("norm_momentum must be in [0, 1], got {}", self.norm_momentum))
        } else if self.epochs == 0 {
            Some("epochs must be ≥ 1".to_string())
        } else if matches!(self.threshold, Threshold::Fixed(v) if v.is_nan()) {
            Some("threshold must not be NaN".to_string())
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::Config(reason)),
            None => Ok(()),
        }
    }

    /// Parses the flat `key=value` format (see module docs).
    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, key, value) in kv_lines(text)? {
            if !cfg.apply_key(key, value, lineno)? {
                return Err(Error::Config(format!("line {lineno}: unknown key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a single `key=value` assignment. Returns `Ok(false)` when the
    /// key is not a training key, so composite configs can try other scopes.
    pub fn apply_key(&mut self, key: &str, value: &str, lineno: usize) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("line {lineno}: bad {what} value {value:?}"));
        match key {
            "strategy" => self.strategy = value.parse()?,
            "threshold" => {
                self.threshold = if value == "auto" {
                    Threshold::Auto
                } else {
                    Threshold::Fixed(value.parse().map_err(|_| bad("threshold"))?)
                }
            }
            "pool_capacity" => {
                self.pool_capacity = value.parse().map_err(|_| bad("pool_capacity"))?
            }
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "focal_gamma" => self.focal_gamma = value.parse().map_err(|_| bad("focal_gamma"))?,
            "learning_rate" => {
                self.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?
            }
            "momentum" => self.momentum = value.parse().map_err(|_| bad("momentum"))?,
            "weight_decay" => {
                self.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?
            }
            "norm_momentum" => {
                self.norm_momentum = value.parse().map_err(|_| bad("norm_momentum"))?
            }
            "epochs" => self.epochs = value.parse().map_err(|_| bad("epochs"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Renders the config back to the key=value format (a parse fixpoint).
    pub fn to_kv_string(&self) -> String {
        let threshold = match self.threshold {
            Threshold::Auto => "auto".to_string(),
            Threshold::Fixed(v) => format!("{v}"),
        };
        format!(
            "strategy={}\nthreshold={}\npool_capacity={}\nbatch_size={}\nfocal_gamma={}\nlearning_rate={}\nmomentum={}\nweight_decay={}\nnorm_momentum={}\nepochs={}\n",
            self.strategy,
            threshold,
            self.pool_capacity,
            self.batch_size,
            self.focal_gamma,
            self.learning_rate,
            self.momentum,
            self.weight_decay,
            self.norm_momentum,
            self.epochs
        )
    }
}

/// Splits a flat key=value config into `(line_number, key, value)` triples,
/// skipping blank lines and `#` comments.
pub fn kv_lines(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {lineno}: expected key=value, got {line:?}"))
        })?;
        out.push((lineno, key.trim(), value.trim()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_hyperparameters() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_size, 24);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert_eq!(cfg.pool_capacity, 5);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn parses_a_full_file_with_comments() {
        let text = "\n# replay setup\nstrategy=easy\nthreshold=1.25\npool_capacity=3\n\nbatch_size=8\nfocal_gamma=0.5\nlearning_rate=0.01\nmomentum=0.8\nweight_decay=0\nnorm_momentum=0.2\nepochs=2\n";
        let cfg = TrainConfig::parse_kv(text).unwrap();
        assert_eq!(cfg.strategy, Strategy::Easy);
        assert_eq!(cfg.threshold, Threshold::Fixed(1.25));
        assert_eq!(cfg.pool_capacity, 3);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.epochs, 2);
    }

    #[test]
    fn threshold_accepts_auto_and_infinities() {
        assert_eq!(
            TrainConfig::parse_kv("threshold=auto").unwrap().threshold,
            Threshold::Auto
        );
        assert_eq!(
            TrainConfig::parse_kv("threshold=inf").unwrap().threshold,
            Threshold::Fixed(f64::INFINITY)
        );
        assert_eq!(
            TrainConfig::parse_kv("threshold=-inf").unwrap().threshold,
            Threshold::Fixed(f64::NEG_INFINITY)
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected_with_line_numbers() {
        let err = TrainConfig::parse_kv("strategy=hard\nbogus=1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = TrainConfig::parse_kv("batch_size=many").unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        let err = TrainConfig::parse_kv("strategy=softish").unwrap_err();
        assert!(err.to_string().contains("unknown strategy"), "{err}");
        let err = TrainConfig::parse_kv("no equals sign").unwrap_err();
        assert!(err.to_string().contains("key=value"), "{err}");
    }

    #[test]
    fn kv_rendering_is_a_parse_fixpoint() {
        let mut cfg = TrainConfig::default();
        cfg.strategy = Strategy::Random;
        cfg.threshold = Threshold::Fixed(0.75);
        cfg.epochs = 3;
        let round = TrainConfig::parse_kv(&cfg.to_kv_string()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn invalid_configs_fail_validation() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.focal_gamma = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }
}
