use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Knobs of the synthetic world: proposal jitter, feature noise, and the
/// error model of the synthetic teacher used by the diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Corner jitter of proposals, as a fraction of the object's width/height.
    pub box_jitter_sigma: f64,
    /// Logit noise of the synthetic teacher's scores.
    pub score_noise_sigma: f64,
    /// Random background proposals per scene.
    pub background_rate: usize,
    /// Per-proposal isotropic feature noise, scaled by the difficulty of the
    /// object the proposal shows.
    pub feature_noise_sigma: f64,
    /// Per-object appearance offset shared by all proposals of the object,
    /// outside the regression subspace.
    pub appearance_sigma: f64,
    /// Per-proposal noise along the regression directions, in delta units and
    /// scaled by the object's difficulty.
    pub delta_noise_sigma: f64,
    /// Jittered proposals per object.
    pub jitter_copies: usize,
    /// Corner noise of the synthetic teacher's regressed boxes, as a fraction of object size.
    pub teacher_reg_sigma: f64,
    /// Log-normal spread of per-object localization difficulty (proposal
    /// features and synthetic teacher alike).
    pub difficulty_sigma: f64,
    /// Share of the teacher's corner-noise variance that is a per-object bias
    /// common to all its regressed boxes; the rest is drawn per proposal.
    pub teacher_bias_share: f64,
}

impl NoiseConfig {
    pub const PRESETS: [&'static str; 3] = ["clean", "default", "coco-like"];

    pub fn clean() -> Self {
        NoiseConfig {
            box_jitter_sigma: 0.0,
            score_noise_sigma: 0.0,
            background_rate: 0,
            feature_noise_sigma: 0.0,
            appearance_sigma: 0.0,
            delta_noise_sigma: 0.0,
            jitter_copies: 8,
            teacher_reg_sigma: 0.0,
            difficulty_sigma: 0.0,
            teacher_bias_share: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "clean" => Ok(Self::clean()),
            "default" => Ok(NoiseConfig {
                box_jitter_sigma: 0.12,
                score_noise_sigma: 1.0,
                background_rate: 24,
                feature_noise_sigma: 0.15,
                appearance_sigma: 0.1,
                delta_noise_sigma: 0.05,
                jitter_copies: 20,
                teacher_reg_sigma: 0.08,
                difficulty_sigma: 0.6,
                teacher_bias_share: 0.5,
            }),
            "coco-like" => Ok(NoiseConfig {
                box_jitter_sigma: 0.12,
                score_noise_sigma: 0.5,
                background_rate: 24,
                feature_noise_sigma: 0.15,
                appearance_sigma: 0.1,
                delta_noise_sigma: 0.05,
                jitter_copies: 10,
                teacher_reg_sigma: 0.06,
                difficulty_sigma: 1.0,
                teacher_bias_share: 0.8,
            }),
            other => Err(Error::Config(format!(
                "unknown noise preset {other:?}; expected one of {:?}",
                Self::PRESETS
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.box_jitter_sigma,
            self.score_noise_sigma,
            self.feature_noise_sigma,
            self.appearance_sigma,
            self.delta_noise_sigma,
            self.teacher_reg_sigma,
            self.difficulty_sigma,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("noise parameters must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_bias_share) {
            return Err(Error::Config("teacher_bias_share must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        for name in NoiseConfig::PRESETS {
            NoiseConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(matches!(NoiseConfig::preset("nope"), Err(Error::Config(_))));
    }
}
