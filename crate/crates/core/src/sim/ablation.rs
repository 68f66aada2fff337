//! One-axis sweeps of the semi-supervised run around a base configuration.

use std::fmt;
use std::str::FromStr;

use super::train::train_pseco;
use super::world::World;
use crate::error::{Error, Result};
use crate::io::config::{TrainConfig, UnsupReg};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Alpha,
    TBag,
    UnsupReg,
    Msl,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Axis::Alpha),
            "t_bag" => Ok(Axis::TBag),
            "unsup_reg" => Ok(Axis::UnsupReg),
            "msl" => Ok(Axis::Msl),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}; expected alpha, t_bag, unsup_reg or msl"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Alpha => "alpha",
            Axis::TBag => "t_bag",
            Axis::UnsupReg => "unsup_reg",
            Axis::Msl => "msl",
        })
    }
}

/// Weight of the feature-consistency term in the `msl` sweep's last setting.
pub const MSL_FEAT_WEIGHT: f64 = 1.0;

/// The settings swept along `axis`, each as a label and the config it yields.
pub fn variants(base: &TrainConfig, axis: Axis) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::Alpha => [0.0, 0.25, 0.5, 0.75, 1.0]
            .into_iter()
            .map(|a| (a.to_string(), with(&|c| c.alpha = a)))
            .collect(),
        Axis::TBag => [0.3, 0.4, 0.5, 0.6]
            .into_iter()
            .map(|t| (t.to_string(), with(&|c| c.t_bag = t)))
            .collect(),
        Axis::UnsupReg => vec![
            ("off".into(), with(&|c| c.unsup_reg = UnsupReg::Off)),
            ("pcv".into(), with(&|c| c.unsup_reg = UnsupReg::Pcv)),
        ],
        Axis::Msl => vec![
            ("single_view".into(), with(&|c| {
                c.multi_view = false;
                c.feat_consistency_weight = 0.0;
            })),
            ("multi_view".into(), with(&|c| {
                c.multi_view = true;
                c.feat_consistency_weight = 0.0;
            })),
            ("multi_view+feat".into(), with(&|c| {
                c.multi_view = true;
                c.feat_consistency_weight = MSL_FEAT_WEIGHT;
            })),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl AblationRow {
    pub fn fields(&self) -> Vec<String> {
        vec![self.axis.to_string(), self.value.clone(), self.map.to_string(), self.ap50.to_string(), self.ap75.to_string()]
    }
}

/// Trains one semi-supervised run per setting and reports its final AP.
pub fn run_ablation(base: &TrainConfig, world: &World, axis: Axis) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (value, cfg) in variants(base, axis) {
        cfg.validate()?;
        let out = train_pseco(&cfg, world)?;
        let ap = out.final_ap.ok_or_else(|| Error::Config("ablation needs steps > 0".into()))?;
        let at = |t: f64| {
            ap.iou_thresholds
                .iter()
                .position(|&x| (x - t).abs() < 1e-9)
                .map_or(f64::NAN, |i| ap.per_threshold[i])
        };
        rows.push(AblationRow { axis, value, map: ap.map, ap50: at(0.5), ap75: at(0.75) });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_parse_and_print() {
        for name in ["alpha", "t_bag", "unsup_reg", "msl"] {
            assert_eq!(name.parse::<Axis>().unwrap().to_string(), name);
        }
        assert!(matches!("beta".parse::<Axis>(), Err(Error::Config(_))));
    }

    #[test]
    fn variants_change_only_their_axis() {
        let base = TrainConfig::default();
        for (label, cfg) in variants(&base, Axis::TBag) {
            assert_eq!(cfg.t_bag.to_string(), label);
            assert_eq!(TrainConfig { t_bag: base.t_bag, ..cfg }, base);
        }
        let regs: Vec<_> = variants(&base, Axis::UnsupReg).into_iter().map(|(_, c)| c.unsup_reg).collect();
        assert_eq!(regs, vec![UnsupReg::Off, UnsupReg::Pcv]);
    }
}
