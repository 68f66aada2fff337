//! Proposal label assignment.
//!
//! Two assigners live here: the plain IoU-threshold assigner used for labeled
//! images, and prediction-guided assignment for pseudo boxes. The latter
//! gathers a loose candidate bag per pseudo box, ranks candidates by a quality
//! that mixes the teacher's class confidence with how well the teacher's
//! regressed box agrees with the pseudo box, and keeps a dynamic number of the
//! best candidates as positives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::pseudo::PseudoLabel;
use crate::sim::detector::Prediction;

/// Default candidate-bag IoU threshold.
pub const DEFAULT_BAG_IOU: f64 = 0.4;
/// Default weight of the classification score in the quality mix.
pub const DEFAULT_QUALITY_ALPHA: f64 = 0.5;
/// Default foreground IoU threshold of the plain assigner.
pub const DEFAULT_POS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive(usize),
    Negative,
    Ignored,
}

impl Label {
    pub fn gt(&self) -> Option<usize> {
        match self {
            Label::Positive(g) => Some(*g),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentResult {
    labels: Vec<Label>,
    pos_per_gt: Vec<usize>,
}

impl AssignmentResult {
    pub fn from_labels(labels: Vec<Label>, n_gts: usize) -> Result<Self> {
        let mut pos_per_gt = vec![0; n_gts];
        for (i, l) in labels.iter().enumerate() {
            if let Label::Positive(g) = l {
                let slot = pos_per_gt
                    .get_mut(*g)
                    .ok_or_else(|| Error::invalid(format!("proposal {i} references gt {g} of {n_gts}")))?;
                *slot += 1;
            }
        }
        Ok(AssignmentResult { labels, pos_per_gt })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn n_proposals(&self) -> usize {
        self.labels.len()
    }

    pub fn n_gts(&self) -> usize {
        self.pos_per_gt.len()
    }

    pub fn positives_per_gt(&self) -> &[usize] {
        &self.pos_per_gt
    }

    pub fn num_positives(&self) -> usize {
        self.pos_per_gt.iter().sum()
    }

    /// Proposal indices assigned to `gt`, ascending.
    pub fn positives_of(&self, gt: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Label::Positive(gt))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScore {
    pub s: f64,
    pub u: f64,
    pub alpha: f64,
    pub q: f64,
}

impl QualityScore {
    pub fn new(s: f64, u: f64, alpha: f64) -> Self {
        QualityScore { s, u, alpha, q: proposal_quality(s, u, alpha) }
    }
}

/// Each proposal goes to the gt it overlaps most (ties to the lower gt index)
/// when that IoU reaches `pos_threshold`; everything else is negative.
pub fn iou_assign(proposals: &[BBox], gts: &[BBox], pos_threshold: f64) -> Result<AssignmentResult> {
    if !(pos_threshold > 0.0 && pos_threshold < 1.0) {
        return Err(Error::invalid(format!("pos_threshold must be in (0,1), got {pos_threshold}")));
    }
    let labels = proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                let v = iou_unchecked(p, g);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= pos_threshold => Label::Positive(j),
                _ => Label::Negative,
            }
        })
        .collect();
    AssignmentResult::from_labels(labels, gts.len())
}

/// Indices (ascending) of proposals whose IoU with `gt` is at least `t`.
pub fn candidate_bag(proposals: &[BBox], gt: &BBox, t: f64) -> Vec<usize> {
    proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| iou_unchecked(p, gt) >= t)
        .map(|(i, _)| i)
        .collect()
}

/// `s^alpha * u^(1 - alpha)`, with `0^0 = 1`.
pub fn proposal_quality(s: f64, u: f64, alpha: f64) -> f64 {
    (s.powf(alpha) * u.powf(1.0 - alpha)).clamp(0.0, 1.0)
}

/// Number of positives for one candidate bag: the floor of the summed IoUs,
/// clamped to `[1, bag size]`.
pub fn dynamic_k(bag_ious: &[f64]) -> Result<usize> {
    if bag_ious.is_empty() {
        return Err(Error::invalid("dynamic_k on an empty candidate bag"));
    }
    let sum: f64 = bag_ious.iter().sum();
    Ok((sum.floor() as usize).clamp(1, bag_ious.len()))
}

/// How the per-gt positive count is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "n")]
pub enum DynamicK {
    /// Sum IoUs over the whole bag.
    WholeBag,
    /// Sum only the `n` largest IoUs of the bag.
    TopIous(usize),
    /// Every candidate is positive.
    FullBag,
}

impl DynamicK {
    fn estimate(&self, bag_ious: &[f64]) -> Result<usize> {
        match *self {
            DynamicK::WholeBag => dynamic_k(bag_ious),
            DynamicK::TopIous(n) => {
                let mut sorted = bag_ious.to_vec();
                sorted.sort_by(|a, b| b.total_cmp(a));
                sorted.truncate(n.max(1));
                let sum: f64 = sorted.iter().sum();
                if bag_ious.is_empty() {
                    return Err(Error::invalid("dynamic_k on an empty candidate bag"));
                }
                Ok((sum.floor() as usize).clamp(1, bag_ious.len()))
            }
            DynamicK::FullBag => {
                if bag_ious.is_empty() {
                    return Err(Error::invalid("dynamic_k on an empty candidate bag"));
                }
                Ok(bag_ious.len())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaOptions {
    pub t: f64,
    pub alpha: f64,
    pub dynamic_k: DynamicK,
}

impl Default for PlaOptions {
    fn default() -> Self {
        PlaOptions { t: DEFAULT_BAG_IOU, alpha: DEFAULT_QUALITY_ALPHA, dynamic_k: DynamicK::WholeBag }
    }
}

/// Prediction-guided assignment of shared proposals to pseudo boxes.
///
/// `teacher_preds[i]` must be the teacher's output on `proposals[i]`. The
/// foreground score is the teacher probability of the pseudo box's own
/// category. A proposal selected for several pseudo boxes keeps the one where
/// its quality is highest (ties to the lower pseudo-box index).
pub fn pla_assign(
    proposals: &[BBox],
    teacher_preds: &[Prediction],
    pseudo_gts: &[PseudoLabel],
    opts: &PlaOptions,
) -> Result<AssignmentResult> {
    if proposals.len() != teacher_preds.len() {
        return Err(Error::invalid(format!(
            "pla_assign: {} proposals but {} predictions",
            proposals.len(),
            teacher_preds.len()
        )));
    }
    if !(opts.t > 0.0 && opts.t < 1.0) {
        return Err(Error::invalid(format!("bag threshold must be in (0,1), got {}", opts.t)));
    }
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(Error::invalid(format!("alpha must be in [0,1], got {}", opts.alpha)));
    }

    let mut best: Vec<Option<(usize, f64)>> = vec![None; proposals.len()];
    for (j, gt) in pseudo_gts.iter().enumerate() {
        let bag = candidate_bag(proposals, &gt.bbox, opts.t);
        if bag.is_empty() {
            continue;
        }
        let bag_ious: Vec<f64> = bag.iter().map(|&i| iou_unchecked(&proposals[i], &gt.bbox)).collect();
        let k = opts.dynamic_k.estimate(&bag_ious)?;

        let mut scored = Vec::with_capacity(bag.len());
        for &i in &bag {
            let pred = &teacher_preds[i];
            let s = *pred.category_probs.get(gt.category_id).ok_or_else(|| {
                Error::invalid(format!(
                    "pseudo box {j} has category {} but prediction {i} has {} categories",
                    gt.category_id,
                    pred.category_probs.len()
                ))
            })?;
            let u = iou_unchecked(&pred.regressed_box, &gt.bbox);
            scored.push((i, proposal_quality(s, u, opts.alpha)));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        for &(i, q) in scored.iter().take(k) {
            if best[i].is_none_or(|(_, bq)| q > bq) {
                best[i] = Some((j, q));
            }
        }
    }

    let labels = best
        .into_iter()
        .map(|b| b.map_or(Label::Negative, |(j, _)| Label::Positive(j)))
        .collect();
    AssignmentResult::from_labels(labels, pseudo_gts.len())
}
