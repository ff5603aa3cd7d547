use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AblationStrategy, AugmentBounds, PhotometricConfig};
use crate::error::{Error, Result};
use crate::model::BackboneKind;
use crate::pseudolabel::DEFAULT_TAU;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    /// Polynomial decay with power 0.9.
    Poly,
}

pub const POLY_POWER: f64 = 0.9;

/// Learning rate after `step` of `total` steps. The endpoints are exact:
/// `lr_max` at step 0 and `lr_min` from step `total` on.
pub fn lr_at(schedule: LrSchedule, lr_max: f64, lr_min: f64, step: usize, total: usize) -> f64 {
    if step == 0 {
        return lr_max;
    }
    if step >= total {
        return lr_min;
    }
    let t = step as f64 / total as f64;
    let shape = match schedule {
        LrSchedule::Cosine => 0.5 * (1.0 + (PI * t).cos()),
        LrSchedule::Poly => (1.0 - t).powf(POLY_POWER),
    };
    lr_min + (lr_max - lr_min) * shape
}

/// Every knob of a training run. Serialized as TOML; unknown keys are
/// rejected and missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of both cross pseudo supervision terms.
    pub omega: f64,
    /// Ramp omega linearly from 0 over the first tenth of training.
    pub omega_warmup: bool,
    pub confidence_tau: f64,
    pub seed: u64,
    pub backbone: BackboneKind,
    /// Square side every image and mask is resized to; native size if unset.
    pub image_size: Option<usize>,
    pub strategy: AblationStrategy,
    /// Share of the labeled split held out for model selection.
    pub val_fraction: f64,
    /// Record zero wall-clock time so repeated runs write identical files.
    pub deterministic: bool,
    pub geometry: AugmentBounds,
    pub photometric: PhotometricConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_labeled: 12,
            batch_unlabeled: 12,
            lr_max: 1e-4,
            lr_min: 1e-6,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            weight_decay: 1e-4,
            omega: 1.0,
            omega_warmup: false,
            confidence_tau: DEFAULT_TAU,
            seed: 0,
            backbone: BackboneKind::Toy,
            image_size: None,
            strategy: AblationStrategy::StrongWeak,
            val_fraction: 0.1,
            deterministic: false,
            geometry: AugmentBounds::default(),
            photometric: PhotometricConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return fail("batch sizes must be at least 1".into());
        }
        if !(self.lr_min.is_finite()
            && self.lr_max.is_finite()
            && 0.0 <= self.lr_min
            && self.lr_min <= self.lr_max)
        {
            return fail(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            ));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return fail("momentum must lie in [0, 1) and weight decay be non-negative".into());
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return fail(format!("omega must be non-negative, got {}", self.omega));
        }
        if !(self.confidence_tau >= 0.0 && self.confidence_tau.is_finite()) {
            return fail(format!(
                "confidence threshold must be non-negative, got {}",
                self.confidence_tau
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if let Some(s) = self.image_size {
            if s < crate::augment::MIN_SIDE {
                return fail(format!("image_size {s} below {}", crate::augment::MIN_SIDE));
            }
        }
        self.geometry.validate()?;
        self.photometric.validate()
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        lr_at(self.lr_schedule, self.lr_max, self.lr_min, step, total)
    }

    /// Effective unsupervised weight at `step`.
    pub fn omega_at(&self, step: usize, total: usize) -> f64 {
        if !self.omega_warmup {
            return self.omega;
        }
        let ramp = (total as f64 * 0.1).max(1.0);
        self.omega * (step as f64 / ramp).min(1.0)
    }

    /// True when the unlabeled stream never contributes to the loss.
    pub fn is_supervised_only(&self) -> bool {
        self.omega == 0.0
    }
}
