//! Pseudo-label generation from teacher detections, plus the precision
//! diagnostics used to show how localization quality degrades with the IoU bar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, nms, score_order, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category_id: usize,
    pub score: f64,
}

/// A teacher detection kept as supervision for an unlabeled image.
///
/// `sigma` is the regression-consistency weight; it stays `None` until
/// [`crate::pcv::attach_sigma`] fills it, and remains `None` for pseudo boxes
/// that received no positive proposals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub category_id: usize,
    pub score: f64,
    pub sigma: Option<f64>,
}

/// Per-category NMS followed by the `score >= tau` filter. Output is
/// score-descending, ties broken by input order.
pub fn generate_pseudo_labels(dets: &[Detection], tau: f64, nms_iou: f64) -> Result<Vec<PseudoLabel>> {
    let n_cat = dets.iter().map(|d| d.category_id + 1).max().unwrap_or(0);
    let mut survivors: Vec<usize> = Vec::new();
    for cat in 0..n_cat {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].category_id == cat).collect();
        if idx.is_empty() {
            continue;
        }
        let boxes: Vec<BBox> = idx.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        survivors.extend(nms(&boxes, &scores, nms_iou)?.into_iter().map(|k| idx[k]));
    }
    survivors.retain(|&i| dets[i].score >= tau);
    survivors.sort_unstable();
    let scores: Vec<f64> = survivors.iter().map(|&i| dets[i].score).collect();
    Ok(score_order(&scores)
        .into_iter()
        .map(|k| {
            let d = &dets[survivors[k]];
            PseudoLabel { bbox: d.bbox, category_id: d.category_id, score: d.score, sigma: None }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionCurve {
    /// `(iou_threshold, precision)` pairs in threshold order.
    pub points: Vec<(f64, f64)>,
    /// Set when there were no pseudo labels; every precision is then 0.
    pub empty: bool,
}

/// Matches pseudo labels one-to-one to same-category ground truths, greedily
/// by descending IoU, and reports the matched fraction per IoU threshold.
pub fn pseudo_precision_curve(
    pseudo: &[PseudoLabel],
    gts: &[(BBox, usize)],
    iou_thresholds: &[f64],
) -> Result<PrecisionCurve> {
    if iou_thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("iou thresholds must be strictly increasing"));
    }
    if pseudo.is_empty() {
        return Ok(PrecisionCurve {
            points: iou_thresholds.iter().map(|&t| (t, 0.0)).collect(),
            empty: true,
        });
    }
    let counts = matched_counts(pseudo, gts, iou_thresholds)?;
    let points = iou_thresholds
        .iter()
        .zip(counts)
        .map(|(&thr, matched)| (thr, matched as f64 / pseudo.len() as f64))
        .collect();
    Ok(PrecisionCurve { points, empty: false })
}

/// Number of pseudo labels matched at each threshold, for pooling curves
/// across images.
pub fn matched_counts(pseudo: &[PseudoLabel], gts: &[(BBox, usize)], iou_thresholds: &[f64]) -> Result<Vec<usize>> {
    if iou_thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("iou thresholds must be strictly increasing"));
    }
    let pairs = ranked_pairs(pseudo, gts);
    Ok(iou_thresholds
        .iter()
        .map(|&thr| greedy_match_count(&pairs, pseudo.len(), gts.len(), thr))
        .collect())
}

/// Same-category `(iou, pseudo, gt)` pairs, IoU-descending then by index.
fn ranked_pairs(pseudo: &[PseudoLabel], gts: &[(BBox, usize)]) -> Vec<(f64, usize, usize)> {
    let mut pairs = Vec::new();
    for (i, p) in pseudo.iter().enumerate() {
        for (j, (g, c)) in gts.iter().enumerate() {
            if *c == p.category_id {
                let v = iou_unchecked(&p.bbox, g);
                if v > 0.0 {
                    pairs.push((v, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs
}

fn greedy_match_count(pairs: &[(f64, usize, usize)], n_pseudo: usize, n_gt: usize, thr: f64) -> usize {
    let mut used_p = vec![false; n_pseudo];
    let mut used_g = vec![false; n_gt];
    let mut count = 0;
    for &(v, i, j) in pairs {
        if v < thr {
            break;
        }
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            count += 1;
        }
    }
    count
}

/// IoU of each pseudo label with its best same-category ground truth (0 if none).
pub fn best_true_ious(pseudo: &[PseudoLabel], gts: &[(BBox, usize)]) -> Vec<f64> {
    pseudo
        .iter()
        .map(|p| {
            gts.iter()
                .filter(|(_, c)| *c == p.category_id)
                .map(|(g, _)| iou_unchecked(&p.bbox, g))
                .fold(0.0, f64::max)
        })
        .collect()
}
