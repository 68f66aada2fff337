//! COCO-style average precision, Pearson correlation, and assignment
//! diagnostics against the simulator's latent ground truth.

use serde::Serialize;

use crate::assignment::{AssignmentResult, Label};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::pseudo::Detection;

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    pub iou_thresholds: Vec<f64>,
    /// AP per IoU threshold, averaged over categories that have ground truth.
    pub per_threshold: Vec<f64>,
    /// AP per category averaged over thresholds; `None` for categories without ground truth.
    pub per_category: Vec<Option<f64>>,
    pub map: f64,
}

/// Per-category, per-threshold AP with 101-point interpolation.
///
/// `dets[i]` and `gts[i]` belong to image `i`. Detections are matched greedily
/// in descending score order; each ground truth is matched at most once, to the
/// detection that reaches it first with the highest IoU.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>], iou_thresholds: &[f64]) -> Result<ApResult> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::invalid("iou thresholds must be non-empty and inside (0,1)"));
    }
    let total_gts: usize = gts.iter().map(Vec::len).sum();
    if total_gts == 0 {
        return Err(Error::invalid("average precision is undefined without ground truth"));
    }
    let n_cat = gts
        .iter()
        .flatten()
        .map(|g| g.1 + 1)
        .chain(dets.iter().flatten().map(|d| d.category_id + 1))
        .max()
        .unwrap_or(0);

    let mut table = vec![vec![None; iou_thresholds.len()]; n_cat];
    for (cat, row) in table.iter_mut().enumerate() {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.1 == cat).count()).sum();
        if n_gt == 0 {
            continue;
        }
        // (score, image, index within image)
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (img, ds) in dets.iter().enumerate() {
            for (k, d) in ds.iter().enumerate() {
                if d.category_id == cat {
                    ranked.push((d.score, img, k));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (ti, &thr) in iou_thresholds.iter().enumerate() {
            let tp = match_ranked(&ranked, dets, gts, cat, thr);
            row[ti] = Some(interpolated_ap(&tp, n_gt));
        }
    }

    let per_threshold: Vec<f64> = (0..iou_thresholds.len())
        .map(|ti| mean(table.iter().filter_map(|r| r[ti])))
        .collect();
    let per_category = table
        .iter()
        .map(|r| if r[0].is_some() { Some(mean(r.iter().flatten().copied())) } else { None })
        .collect();
    let map = mean(per_threshold.iter().copied());
    Ok(ApResult { iou_thresholds: iou_thresholds.to_vec(), per_threshold, per_category, map })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn match_ranked(
    ranked: &[(f64, usize, usize)],
    dets: &[Vec<Detection>],
    gts: &[Vec<(BBox, usize)>],
    cat: usize,
    thr: f64,
) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|&(_, img, k)| {
            let d = &dets[img][k];
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, c)) in gts[img].iter().enumerate() {
                if *c != cat || taken[img][j] {
                    continue;
                }
                let v = iou_unchecked(&d.bbox, g);
                if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let pos = recall.partition_point(|&x| x < level);
        if pos < precision.len() {
            sum += precision[pos];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("pearson: lengths {} and {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("pearson needs at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation undefined for constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct AssignmentQuality {
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
    pub positives: usize,
    pub false_positives: usize,
    pub true_foreground: usize,
    pub missed_foreground: usize,
}

impl AssignmentQuality {
    /// Pools counts across images.
    pub fn merge(&self, other: &AssignmentQuality) -> AssignmentQuality {
        let positives = self.positives + other.positives;
        let false_positives = self.false_positives + other.false_positives;
        let true_foreground = self.true_foreground + other.true_foreground;
        let missed_foreground = self.missed_foreground + other.missed_foreground;
        AssignmentQuality {
            false_positive_rate: ratio(false_positives, positives),
            false_negative_rate: ratio(missed_foreground, true_foreground),
            positives,
            false_positives,
            true_foreground,
            missed_foreground,
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// IoU a positive must reach against a true box of its category to count as correct.
pub const TRUE_FG_IOU: f64 = 0.5;

/// Scores an assignment against latent ground truth.
///
/// `gt_categories[g]` is the category of the (pseudo) gt that label
/// `Positive(g)` refers to. A positive is false when its IoU with every true
/// box of that category is below 0.5. A proposal with IoU >= 0.5 to any true
/// box of any category is true foreground; it is missed when labeled negative.
pub fn assignment_quality(
    assignment: &AssignmentResult,
    proposals: &[BBox],
    gt_categories: &[usize],
    true_gts: &[(BBox, usize)],
) -> Result<AssignmentQuality> {
    if assignment.n_proposals() != proposals.len() {
        return Err(Error::invalid(format!(
            "assignment covers {} proposals, got {}",
            assignment.n_proposals(),
            proposals.len()
        )));
    }
    if gt_categories.len() != assignment.n_gts() {
        return Err(Error::invalid("one category per assigned gt is required"));
    }
    let mut q = AssignmentQuality::default();
    for (p, label) in proposals.iter().zip(assignment.labels()) {
        let is_fg = true_gts.iter().any(|(g, _)| iou_unchecked(p, g) >= TRUE_FG_IOU);
        if is_fg {
            q.true_foreground += 1;
        }
        match label {
            Label::Positive(g) => {
                q.positives += 1;
                let cat = gt_categories[*g];
                let ok = true_gts.iter().any(|(t, c)| *c == cat && iou_unchecked(p, t) >= TRUE_FG_IOU);
                if !ok {
                    q.false_positives += 1;
                }
            }
            Label::Negative => {
                if is_fg {
                    q.missed_foreground += 1;
                }
            }
            Label::Ignored => {}
        }
    }
    q.false_positive_rate = ratio(q.false_positives, q.positives);
    q.false_negative_rate = ratio(q.missed_foreground, q.true_foreground);
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::iou_assign;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn d(bbox: BBox, cat: usize, score: f64) -> Detection {
        Detection { bbox, category_id: cat, score }
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![vec![(b(0., 0., 10., 10.), 0), (b(20., 20., 40., 40.), 1)], vec![(b(5., 5., 9., 9.), 0)]];
        let dets: Vec<Vec<Detection>> = gts.iter().map(|g| g.iter().map(|(bb, c)| d(*bb, *c, 1.0)).collect()).collect();
        let r = average_precision(&dets, &gts, &coco_iou_thresholds()).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.per_category, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn no_detections() {
        let gts = vec![vec![(b(0., 0., 10., 10.), 0)]];
        let r = average_precision(&[vec![]], &gts, &coco_iou_thresholds()).unwrap();
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let dets = vec![vec![d(b(0., 0., 1., 1.), 0, 0.5)]];
        assert!(average_precision(&dets, &[vec![]], &[0.5]).is_err());
    }

    #[test]
    fn three_dets_two_gts_hand_case() {
        // Ranked: TP (0.9), FP (0.8), TP (0.7) with 2 gts.
        // precision 1, 1/2, 2/3; recall 1/2, 1/2, 1. Envelope 1, 2/3, 2/3.
        // Recall levels 0..=0.5 (51 points) -> 1, 0.51..=1.0 (50 points) -> 2/3.
        let gts = vec![vec![(b(0., 0., 10., 10.), 0), (b(50., 50., 60., 60.), 0)]];
        let dets = vec![vec![
            d(b(0., 0., 10., 10.), 0, 0.9),
            d(b(100., 100., 110., 110.), 0, 0.8),
            d(b(50., 50., 60., 60.), 0, 0.7),
        ]];
        let r = average_precision(&dets, &gts, &[0.5]).unwrap();
        let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((r.map - expected).abs() < 1e-15);
    }

    #[test]
    fn pearson_fixtures() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
        // ys = [2,4,5,4,5]: mean 4, sxy = 6, sxx = 10, syy = 6 -> 6/sqrt(60).
        let ys = [2.0, 4.0, 5.0, 4.0, 5.0];
        assert!((pearson(&xs, &ys).unwrap() - 6.0 / 60f64.sqrt()).abs() < 1e-12);
        assert!(pearson(&xs, &[1.0; 5]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn assignment_from_truth_has_no_false_positives() {
        let truth = vec![(b(0., 0., 10., 10.), 0)];
        let props = [b(0., 0., 10., 10.), b(1., 0., 11., 10.), b(30., 30., 40., 40.)];
        let a = iou_assign(&props, &[truth[0].0], 0.5).unwrap();
        let q = assignment_quality(&a, &props, &[0], &truth).unwrap();
        assert_eq!(q.false_positive_rate, 0.0);
        assert_eq!(q.false_negative_rate, 0.0);
    }

    #[test]
    fn all_positive_on_empty_scene() {
        let props = [b(0., 0., 10., 10.), b(30., 30., 40., 40.)];
        let a = AssignmentResult::from_labels(vec![Label::Positive(0); 2], 1).unwrap();
        let q = assignment_quality(&a, &props, &[0], &[]).unwrap();
        assert_eq!(q.false_positive_rate, 1.0);
    }

    #[test]
    fn wrong_category_is_false_positive() {
        let truth = vec![(b(0., 0., 10., 10.), 1)];
        let props = [b(0., 0., 10., 10.)];
        let a = AssignmentResult::from_labels(vec![Label::Positive(0)], 1).unwrap();
        let q = assignment_quality(&a, &props, &[0], &truth).unwrap();
        assert_eq!(q.false_positives, 1);
    }
}
