//! Run configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::DynamicK;
use crate::error::{Error, Result};
use crate::losses::FocalParams;
use crate::sim::noise::NoiseConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnsupReg {
    /// No box regression on unlabeled images.
    Off,
    /// Regression weighted by consistency votes.
    Pcv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub version: u32,

    /// Pseudo-label score threshold.
    pub tau: f64,
    /// Weight of the unlabeled loss.
    pub beta: f64,
    /// Classification-score exponent in the proposal quality.
    pub alpha: f64,
    /// Candidate-bag IoU threshold.
    pub t_bag: f64,
    /// Foreground IoU threshold on labeled images.
    pub pos_threshold: f64,
    pub dynamic_k: DynamicK,
    pub nms_iou: f64,

    pub ema_momentum: f64,
    pub burn_in_steps: usize,
    pub labeled_batch: usize,
    /// Unlabeled images per labeled image in a step.
    pub unlabeled_ratio: usize,

    pub resize_range: (f64, f64),
    pub downsample_factor: u32,
    /// Train on the downsampled view as well.
    pub multi_view: bool,
    pub hflip_prob: f64,
    pub unsup_reg: UnsupReg,
    pub feat_consistency_weight: f64,
    /// Std of feature noise injected into student inputs.
    pub strong_aug_sigma: f64,

    pub focal: FocalParams,
    pub lr: f64,
    /// L2 penalty on head weights (biases excluded).
    pub weight_decay: f64,
    /// Fractions of `steps` at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_scenes: usize,

    pub noise_preset: String,
    /// Overrides the named preset when present.
    pub noise: Option<NoiseConfig>,
    pub feature_dim: usize,

    /// Synthetic dataset used when no dataset file is given.
    pub scenes: usize,
    pub categories: usize,
    pub labeled_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            tau: 0.5,
            beta: 4.0,
            alpha: 0.5,
            t_bag: 0.4,
            pos_threshold: 0.5,
            dynamic_k: DynamicK::WholeBag,
            nms_iou: 0.5,
            ema_momentum: 0.999,
            burn_in_steps: 500,
            labeled_batch: 1,
            unlabeled_ratio: 4,
            resize_range: (0.8, 1.3),
            downsample_factor: 2,
            multi_view: true,
            hflip_prob: 0.5,
            unsup_reg: UnsupReg::Pcv,
            feat_consistency_weight: 0.0,
            strong_aug_sigma: 0.05,
            focal: FocalParams::default(),
            lr: 0.02,
            weight_decay: 0.0,
            lr_milestones: vec![0.75, 0.9],
            lr_gamma: 0.1,
            steps: 4000,
            seed: 0,
            eval_every: 500,
            eval_scenes: 200,
            noise_preset: "default".into(),
            noise: None,
            feature_dim: 128,
            scenes: 100,
            categories: 3,
            labeled_fraction: 0.1,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
    }
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be in (0, 1), got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: CONFIG_VERSION,
                hint: "config files have no migration path yet; rewrite the file against the current field list".into(),
            });
        }
        unit("tau", self.tau)?;
        unit("alpha", self.alpha)?;
        unit("ema_momentum", self.ema_momentum)?;
        unit("hflip_prob", self.hflip_prob)?;
        unit("focal.alpha_t", self.focal.alpha_t)?;
        open_unit("t_bag", self.t_bag)?;
        open_unit("pos_threshold", self.pos_threshold)?;
        open_unit("nms_iou", self.nms_iou)?;
        open_unit("labeled_fraction", self.labeled_fraction).or_else(|e| {
            if self.labeled_fraction == 1.0 {
                Ok(())
            } else {
                Err(e)
            }
        })?;
        let non_negative = [
            ("beta", self.beta),
            ("feat_consistency_weight", self.feat_consistency_weight),
            ("strong_aug_sigma", self.strong_aug_sigma),
            ("weight_decay", self.weight_decay),
            ("focal.gamma", self.focal.gamma),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::Config(format!("lr_gamma must be in (0, 1], got {}", self.lr_gamma)));
        }
        for &m in &self.lr_milestones {
            unit("lr_milestones entry", m)?;
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        let (lo, hi) = self.resize_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("resize_range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
        }
        if self.downsample_factor == 0 || self.downsample_factor % 2 != 0 {
            return Err(Error::Config(format!(
                "downsample_factor must be a positive even integer, got {}",
                self.downsample_factor
            )));
        }
        if self.unlabeled_ratio == 0 || self.labeled_batch == 0 {
            return Err(Error::Config("unlabeled_ratio and labeled_batch must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.categories == 0 {
            return Err(Error::Config("categories must be positive".into()));
        }
        if let DynamicK::TopIous(0) = self.dynamic_k {
            return Err(Error::Config("dynamic_k top count must be positive".into()));
        }
        self.noise_config()?.validate()
    }

    /// Learning rate in effect at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| step as f64 >= m * self.steps as f64).count();
        self.lr * self.lr_gamma.powi(passed as i32)
    }

    pub fn noise_config(&self) -> Result<NoiseConfig> {
        match self.noise {
            Some(n) => Ok(n),
            None => NoiseConfig::preset(&self.noise_preset),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Reads and validates a TOML run configuration. Missing fields take defaults;
/// unknown fields are rejected.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    TrainConfig::from_toml_str(&text)
}

pub fn save_config(cfg: &TrainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, cfg.to_toml_string()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.beta, 4.0);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.t_bag, 0.4);
        assert_eq!(cfg.pos_threshold, 0.5);
        assert_eq!(cfg.ema_momentum, 0.999);
        assert_eq!(cfg.burn_in_steps, 500);
        assert_eq!(cfg.unlabeled_ratio, 4);
        assert_eq!(cfg.resize_range, (0.8, 1.3));
        assert_eq!(cfg.downsample_factor, 2);
        assert_eq!(cfg.unsup_reg, UnsupReg::Pcv);
        assert_eq!(cfg.feat_consistency_weight, 0.0);
    }

    #[test]
    fn round_trip() {
        let cfg = TrainConfig {
            beta: 2.5,
            dynamic_k: DynamicK::TopIous(10),
            unsup_reg: UnsupReg::Off,
            noise: Some(NoiseConfig::clean()),
            ..Default::default()
        };
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(matches!(TrainConfig::from_toml_str("tua = 0.5"), Err(Error::Config(_))));
    }

    #[test]
    fn range_violations_rejected() {
        for bad in ["tau = 1.5", "beta = -1.0", "ema_momentum = 2.0", "downsample_factor = 3", "t_bag = 0.0"] {
            assert!(matches!(TrainConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn version_mismatch() {
        assert!(matches!(TrainConfig::from_toml_str("version = 7"), Err(Error::Version { found: 7, .. })));
    }
}
