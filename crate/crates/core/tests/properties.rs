mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pseco::assignment::{pla_assign, PlaOptions};
use pseco::eval::{average_precision, coco_iou_thresholds, pearson};
use pseco::geometry::{iou, nms, BBox};
use pseco::pseudo::{Detection, PseudoLabel};
use pseco::sim::detector::Prediction;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn iou_matches_cell_count(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_ibox(&mut r), random_ibox(&mut r));
        let v = iou(&a.to_bbox(), &b.to_bbox()).unwrap();
        prop_assert_eq!(v, iou_oracle(&a, &b));
        prop_assert_eq!(v, iou(&b.to_bbox(), &a.to_bbox()).unwrap());
    }

    #[test]
    fn nms_matches_fixed_point(seed in any::<u64>(), n in 0usize..=10, thr_idx in 0usize..4) {
        let mut r = rng(seed);
        let thr = [0.3, 0.5, 0.7, 0.9][thr_idx];
        let boxes: Vec<IBox> = (0..n).map(|_| random_ibox(&mut r)).collect();
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64 / 4.0).collect();
        let bb: Vec<BBox> = boxes.iter().map(|b| b.to_bbox()).collect();
        prop_assert_eq!(nms(&bb, &scores, thr).unwrap(), nms_oracle(&boxes, &scores, thr));
    }

    #[test]
    fn ap_matches_prefix_enumeration(seed in any::<u64>()) {
        let inst = random_ap_instance(&mut rng(seed));
        let thr = coco_iou_thresholds();
        let ap = average_precision(&inst.detections(), &inst.ground_truth(), &thr).unwrap();
        let (per, map) = ap_oracle(&inst, &thr);
        prop_assert_eq!(ap.per_threshold, per);
        prop_assert_eq!(ap.map, map);
    }

    #[test]
    fn ap_never_drops_when_a_false_positive_is_removed(seed in any::<u64>()) {
        let inst = random_ap_instance(&mut rng(seed));
        let gts = inst.ground_truth();
        let dets = inst.detections();
        let thr = [0.5];
        let base = average_precision(&dets, &gts, &thr).unwrap().map;
        for (img, ds) in dets.iter().enumerate() {
            for k in 0..ds.len() {
                let d = ds[k];
                let overlaps_own = gts[img].iter().any(|g| g.1 == d.category_id && iou(&g.0, &d.bbox).unwrap() >= 0.5);
                if overlaps_own {
                    continue;
                }
                let mut fewer = dets.clone();
                fewer[img].remove(k);
                prop_assert!(average_precision(&fewer, &gts, &thr).unwrap().map >= base);
            }
        }
    }

    #[test]
    fn ap_is_monotone_in_threshold(seed in any::<u64>()) {
        let inst = random_ap_instance(&mut rng(seed));
        let ap = average_precision(&inst.detections(), &inst.ground_truth(), &coco_iou_thresholds()).unwrap();
        for w in ap.per_threshold.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn pla_matches_rank_counting(seed in any::<u64>(), alpha_idx in 0usize..3) {
        let mut r = rng(seed);
        let alpha = [0.0, 0.5, 1.0][alpha_idx];
        let n = r.random_range(1..=10);
        let proposals: Vec<IBox> = (0..n).map(|_| random_ibox(&mut r)).collect();
        let regressed: Vec<IBox> = (0..n).map(|_| random_ibox(&mut r)).collect();
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| r.random_range(0..=4) as f64 / 4.0).collect()).collect();
        let pseudo: Vec<(IBox, usize)> = (0..r.random_range(0..=3)).map(|_| (random_ibox(&mut r), r.random_range(0..2))).collect();

        let preds: Vec<Prediction> = (0..n)
            .map(|i| Prediction { category_probs: scores[i].clone(), regressed_box: regressed[i].to_bbox() })
            .collect();
        let pls: Vec<PseudoLabel> = pseudo
            .iter()
            .map(|&(b, c)| PseudoLabel { bbox: b.to_bbox(), category_id: c, score: 0.9, sigma: None })
            .collect();
        let boxes: Vec<BBox> = proposals.iter().map(|b| b.to_bbox()).collect();
        let opts = PlaOptions { alpha, ..PlaOptions::default() };
        let got = pla_assign(&boxes, &preds, &pls, &opts).unwrap();
        prop_assert_eq!(got.labels().to_vec(), pla_oracle(&proposals, &scores, &regressed, &pseudo, opts.t, alpha));
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(
        xs in prop::collection::vec(-10.0f64..10.0, 3..30),
        a in 0.1f64..10.0, b in -5.0f64..5.0, c in 0.1f64..10.0, d in -5.0f64..5.0,
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + 0.1 * i as f64).collect();
        if let Ok(r) = pearson(&xs, &ys) {
            let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let ys2: Vec<f64> = ys.iter().map(|y| c * y + d).collect();
            prop_assert!((pearson(&xs2, &ys2).unwrap() - r).abs() < 1e-12);
        }
    }
}

#[test]
fn exact_detections_score_one() {
    let mut r = rng(11);
    let gts: Vec<Vec<(BBox, usize)>> = (0..3).map(|_| (0..3).map(|k| (random_ibox(&mut r).to_bbox(), k % 2)).collect()).collect();
    let dets: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| g.iter().map(|&(bbox, category_id)| Detection { bbox, category_id, score: 1.0 }).collect())
        .collect();
    assert_eq!(average_precision(&dets, &gts, &coco_iou_thresholds()).unwrap().map, 1.0);
}
