//! Pseudo-label diagnostics against latent truth: how precise pseudo boxes
//! are across IoU thresholds, how well consistency votes track true box
//! quality, and how often each assigner labels a proposal positive for the
//! wrong reason.

use serde::Serialize;

use super::detector::{DetectorParams, Prediction};
use super::teacher::synthetic_teacher;
use super::world::World;
use crate::assignment::{iou_assign, pla_assign, PlaOptions};
use crate::error::Result;
use crate::eval::{assignment_quality, pearson, AssignmentQuality};
use crate::io::config::TrainConfig;
use crate::pcv::attach_sigma;
use crate::pseudo::{best_true_ious, matched_counts, PrecisionCurve};

/// Thresholds of the pooled precision curve.
pub fn curve_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Pseudo boxes whose best true IoU lies in this band count as "mid quality".
pub const MID_BAND: (f64, f64) = (0.3, 0.9);

#[derive(Debug, Clone, Copy)]
pub enum TeacherSource<'a> {
    /// The error-controlled stand-in from `sim::teacher`.
    Synthetic,
    Trained(&'a DetectorParams),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoDiagnostics {
    pub n_scenes: usize,
    pub n_pseudo: usize,
    /// Pooled over scenes.
    pub precision: PrecisionCurve,
    /// Fraction of pseudo boxes with best true IoU inside [`MID_BAND`].
    pub mid_fraction: f64,
    /// Votes of pseudo boxes that received at least one positive, and their true IoUs.
    pub sigmas: Vec<f64>,
    pub true_ious: Vec<f64>,
    pub sigma_pearson: Option<f64>,
    pub pla: AssignmentQuality,
    pub iou: AssignmentQuality,
}

pub fn teacher_predictions(world: &World, scene: usize, source: TeacherSource<'_>) -> Result<Vec<Prediction>> {
    match source {
        TeacherSource::Synthetic => synthetic_teacher(
            &world.data.scenes[scene],
            &world.boxes(scene),
            world.data.n_categories,
            &world.noise,
            world.seed,
        ),
        TeacherSource::Trained(p) => world.predict(p, scene),
    }
}

/// Runs pseudo labeling, both assigners and consistency voting on every scene
/// of `world`, scoring each against the scene's latent objects.
pub fn diagnose(world: &World, source: TeacherSource<'_>, cfg: &TrainConfig) -> Result<PseudoDiagnostics> {
    let thresholds = curve_thresholds();
    let mut matched = vec![0usize; thresholds.len()];
    let mut n_pseudo = 0;
    let mut n_mid = 0;
    let mut sigmas = Vec::new();
    let mut true_ious = Vec::new();
    let mut pla = AssignmentQuality::default();
    let mut iou = AssignmentQuality::default();
    let opts = PlaOptions { t: cfg.t_bag, alpha: cfg.alpha, dynamic_k: cfg.dynamic_k };

    for (i, scene) in world.data.scenes.iter().enumerate() {
        let truth = scene.gt_pairs();
        let boxes = world.boxes(i);
        let preds = teacher_predictions(world, i, source)?;
        let pseudo = super::train::pseudo_from_predictions(cfg, &preds)?;
        n_pseudo += pseudo.len();
        for (m, c) in matched.iter_mut().zip(matched_counts(&pseudo, &truth, &thresholds)?) {
            *m += c;
        }
        let best = best_true_ious(&pseudo, &truth);
        n_mid += best.iter().filter(|&&v| v >= MID_BAND.0 && v <= MID_BAND.1).count();

        let cats: Vec<usize> = pseudo.iter().map(|p| p.category_id).collect();
        let pseudo_boxes: Vec<_> = pseudo.iter().map(|p| p.bbox).collect();
        let a_pla = pla_assign(&boxes, &preds, &pseudo, &opts)?;
        let a_iou = iou_assign(&boxes, &pseudo_boxes, cfg.pos_threshold)?;
        pla = pla.merge(&assignment_quality(&a_pla, &boxes, &cats, &truth)?);
        iou = iou.merge(&assignment_quality(&a_iou, &boxes, &cats, &truth)?);

        let voted = attach_sigma(&pseudo, &a_pla, &preds)?;
        for (p, t) in voted.iter().zip(&best) {
            if let Some(s) = p.sigma {
                sigmas.push(s);
                true_ious.push(*t);
            }
        }
    }

    let precision = PrecisionCurve {
        points: thresholds
            .iter()
            .zip(&matched)
            .map(|(&t, &m)| (t, if n_pseudo == 0 { 0.0 } else { m as f64 / n_pseudo as f64 }))
            .collect(),
        empty: n_pseudo == 0,
    };
    let sigma_pearson = pearson(&sigmas, &true_ious).ok();
    Ok(PseudoDiagnostics {
        n_scenes: world.data.scenes.len(),
        n_pseudo,
        precision,
        mid_fraction: if n_pseudo == 0 { 0.0 } else { n_mid as f64 / n_pseudo as f64 },
        sigmas,
        true_ious,
        sigma_pearson,
        pla,
        iou,
    })
}

impl PseudoDiagnostics {
    pub fn precision_at(&self, thr: f64) -> Option<f64> {
        self.precision.points.iter().find(|(t, _)| (t - thr).abs() < 1e-9).map(|p| p.1)
    }
}
