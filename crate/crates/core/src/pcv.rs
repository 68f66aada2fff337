//! Positive-proposal consistency voting.
//!
//! A pseudo box is trusted for regression in proportion to how well the
//! teacher's regressed boxes of its positive proposals agree with it.

use crate::assignment::AssignmentResult;
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::pseudo::PseudoLabel;
use crate::sim::detector::Prediction;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyScore {
    pub gt_index: usize,
    pub sigma: f64,
    pub n_positives: usize,
}

/// Mean IoU between each predicted box and the pseudo box.
pub fn consistency_vote(pred_boxes: &[BBox], pseudo_box: &BBox) -> Result<f64> {
    if pred_boxes.is_empty() {
        return Err(Error::invalid("consistency vote over zero positives"));
    }
    let sum: f64 = pred_boxes.iter().map(|p| iou_unchecked(p, pseudo_box)).sum();
    Ok((sum / pred_boxes.len() as f64).clamp(0.0, 1.0))
}

/// Per-gt consistency scores; gts without positives are omitted.
pub fn consistency_scores(
    pseudo_gts: &[PseudoLabel],
    assignment: &AssignmentResult,
    teacher_preds: &[Prediction],
) -> Result<Vec<ConsistencyScore>> {
    if assignment.n_proposals() != teacher_preds.len() {
        return Err(Error::invalid(format!(
            "assignment covers {} proposals but there are {} predictions",
            assignment.n_proposals(),
            teacher_preds.len()
        )));
    }
    if assignment.n_gts() != pseudo_gts.len() {
        return Err(Error::invalid(format!(
            "assignment covers {} gts but there are {} pseudo labels",
            assignment.n_gts(),
            pseudo_gts.len()
        )));
    }
    let mut groups: Vec<Vec<BBox>> = vec![Vec::new(); pseudo_gts.len()];
    for (i, label) in assignment.labels().iter().enumerate() {
        if let Some(g) = label.gt() {
            groups[g].push(teacher_preds[i].regressed_box);
        }
    }
    groups
        .iter()
        .enumerate()
        .filter(|(_, boxes)| !boxes.is_empty())
        .map(|(j, boxes)| {
            Ok(ConsistencyScore {
                gt_index: j,
                sigma: consistency_vote(boxes, &pseudo_gts[j].bbox)?,
                n_positives: boxes.len(),
            })
        })
        .collect()
}

/// Returns the pseudo labels with `sigma` filled from their positives'
/// teacher-regressed boxes. Labels with no positives get `sigma = None`.
pub fn attach_sigma(
    pseudo_gts: &[PseudoLabel],
    assignment: &AssignmentResult,
    teacher_preds: &[Prediction],
) -> Result<Vec<PseudoLabel>> {
    let scores = consistency_scores(pseudo_gts, assignment, teacher_preds)?;
    let mut out: Vec<PseudoLabel> = pseudo_gts.iter().map(|p| PseudoLabel { sigma: None, ..*p }).collect();
    for s in scores {
        out[s.gt_index].sigma = Some(s.sigma);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::Label;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Box sharing the left/top/bottom edges of `[0,0,10,10]` with the given IoU.
    fn with_iou(v: f64) -> BBox {
        b(0., 0., 10. * v, 10.)
    }

    fn pred(reg: BBox) -> Prediction {
        Prediction { category_probs: vec![0.9], regressed_box: reg }
    }

    fn pl(bbox: BBox) -> PseudoLabel {
        PseudoLabel { bbox, category_id: 0, score: 0.9, sigma: None }
    }

    #[test]
    fn vote_fixtures() {
        let g = b(0., 0., 10., 10.);
        assert_eq!(consistency_vote(&[g, g, g], &g).unwrap(), 1.0);
        let v = consistency_vote(&[with_iou(0.5), with_iou(0.7), with_iou(0.9)], &g).unwrap();
        assert!((v - 0.7).abs() < 1e-12);
        assert_eq!(consistency_vote(&[b(20., 20., 30., 30.)], &g).unwrap(), 0.0);
        assert!(consistency_vote(&[], &g).is_err());
    }

    #[test]
    fn attach_one_exact_positive() {
        let g = b(0., 0., 10., 10.);
        let a = AssignmentResult::from_labels(vec![Label::Positive(0)], 1).unwrap();
        let out = attach_sigma(&[pl(g)], &a, &[pred(g)]).unwrap();
        assert_eq!(out[0].sigma, Some(1.0));
    }

    #[test]
    fn attach_zero_positives_is_absent() {
        let g = b(0., 0., 10., 10.);
        let a = AssignmentResult::from_labels(vec![Label::Negative], 1).unwrap();
        let out = attach_sigma(&[pl(g)], &a, &[pred(g)]).unwrap();
        assert_eq!(out[0].sigma, None);
    }

    #[test]
    fn attach_two_gts() {
        let g0 = b(0., 0., 10., 10.);
        let g1 = b(100., 0., 110., 10.);
        let preds = [pred(with_iou(0.8)), pred(with_iou(0.6)), pred(b(100., 0., 104., 10.))];
        let a = AssignmentResult::from_labels(vec![Label::Positive(0), Label::Positive(0), Label::Positive(1)], 2)
            .unwrap();
        let out = attach_sigma(&[pl(g0), pl(g1)], &a, &preds).unwrap();
        assert!((out[0].sigma.unwrap() - 0.7).abs() < 1e-12);
        assert!((out[1].sigma.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn attach_index_mismatch() {
        let g = b(0., 0., 10., 10.);
        let a = AssignmentResult::from_labels(vec![Label::Positive(0), Label::Negative], 1).unwrap();
        assert!(attach_sigma(&[pl(g)], &a, &[pred(g)]).is_err());
    }
}
