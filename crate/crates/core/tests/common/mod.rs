//! Brute-force reference implementations shared by the property and
//! acceptance suites. Boxes here live on an integer grid so that areas are
//! counted cell by cell and every IoU is an exact ratio of integers.

#![allow(dead_code)]

use pseco::assignment::Label;
use pseco::geometry::BBox;
use pseco::pseudo::Detection;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRID: i64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IBox {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl IBox {
    pub fn to_bbox(self) -> BBox {
        BBox::new(self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64).unwrap()
    }

    fn contains_cell(&self, x: i64, y: i64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

pub fn random_ibox(rng: &mut ChaCha8Rng) -> IBox {
    let (a, b) = (rng.random_range(0..GRID), rng.random_range(0..GRID));
    let (c, d) = (rng.random_range(0..GRID), rng.random_range(0..GRID));
    IBox { x1: a.min(b), y1: c.min(d), x2: a.max(b) + 1, y2: c.max(d) + 1 }
}

/// IoU by counting unit cells.
pub fn iou_oracle(a: &IBox, b: &IBox) -> f64 {
    let (mut inter, mut ca, mut cb) = (0i64, 0i64, 0i64);
    for y in 0..=GRID + 1 {
        for x in 0..=GRID + 1 {
            let (ia, ib) = (a.contains_cell(x, y), b.contains_cell(x, y));
            ca += ia as i64;
            cb += ib as i64;
            inter += (ia && ib) as i64;
        }
    }
    if inter == 0 {
        0.0
    } else {
        inter as f64 / (ca + cb - inter) as f64
    }
}

/// Strict priority: higher score first, lower index on ties.
fn outranks(scores: &[f64], j: usize, i: usize) -> bool {
    scores[j] > scores[i] || (scores[j] == scores[i] && j < i)
}

/// Greedy suppression has exactly one fixed point: the set `S` in which a box
/// belongs iff no higher-priority member of `S` overlaps it at or above the
/// threshold. Finds it by checking every subset; returns members by priority.
pub fn nms_oracle(boxes: &[IBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    assert!(n <= 12, "subset enumeration is exponential");
    let mut fixed_points = Vec::new();
    for mask in 0u32..(1 << n) {
        let member = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| j != i && member(j) && outranks(scores, j, i) && iou_oracle(&boxes[j], &boxes[i]) >= thr);
            member(i) == !blocked
        });
        if consistent {
            fixed_points.push(mask);
        }
    }
    assert_eq!(fixed_points.len(), 1, "suppression fixed point must be unique");
    let mut kept: Vec<usize> = (0..n).filter(|&i| fixed_points[0] & (1 << i) != 0).collect();
    kept.sort_by(|&a, &b| if outranks(scores, a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept
}

pub struct ApInstance {
    pub dets: Vec<Vec<(IBox, usize, f64)>>,
    pub gts: Vec<Vec<(IBox, usize)>>,
}

impl ApInstance {
    pub fn detections(&self) -> Vec<Vec<Detection>> {
        self.dets
            .iter()
            .map(|ds| ds.iter().map(|&(b, c, s)| Detection { bbox: b.to_bbox(), category_id: c, score: s }).collect())
            .collect()
    }

    pub fn ground_truth(&self) -> Vec<Vec<(BBox, usize)>> {
        self.gts.iter().map(|gs| gs.iter().map(|&(b, c)| (b.to_bbox(), c)).collect()).collect()
    }
}

/// Up to three images with at most ten detections and ten gts in total, two
/// categories, and scores drawn from a coarse set so that ties occur.
pub fn random_ap_instance(rng: &mut ChaCha8Rng) -> ApInstance {
    let n_img = rng.random_range(1..=3);
    let n_det = rng.random_range(0..=10);
    let n_gt = rng.random_range(1..=10);
    let mut dets = vec![Vec::new(); n_img];
    let mut gts = vec![Vec::new(); n_img];
    for _ in 0..n_det {
        let img = rng.random_range(0..n_img);
        let score = rng.random_range(1..=5) as f64 / 5.0;
        dets[img].push((random_ibox(rng), rng.random_range(0..2), score));
    }
    for _ in 0..n_gt {
        let img = rng.random_range(0..n_img);
        gts[img].push((random_ibox(rng), rng.random_range(0..2)));
    }
    ApInstance { dets, gts }
}

/// Detections of `cat` as `(image, index)`, by score, then image, then index.
fn ranked(inst: &ApInstance, cat: usize) -> Vec<(usize, usize)> {
    let mut r: Vec<(usize, usize)> = Vec::new();
    for (img, ds) in inst.dets.iter().enumerate() {
        for (k, d) in ds.iter().enumerate() {
            if d.1 == cat {
                r.push((img, k));
            }
        }
    }
    r.sort_by(|a, b| {
        let (sa, sb) = (inst.dets[a.0][a.1].2, inst.dets[b.0][b.1].2);
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    r
}

/// True positives among the first `n` ranked detections, matching that prefix
/// from scratch: each detection takes the untaken gt of its category and image
/// with the highest IoU at or above `thr`, lower gt index on ties.
fn prefix_hits(inst: &ApInstance, order: &[(usize, usize)], n: usize, cat: usize, thr: f64) -> usize {
    let mut taken: Vec<Vec<bool>> = inst.gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = 0;
    for &(img, k) in &order[..n] {
        let d = inst.dets[img][k].0;
        let mut best: Option<(usize, f64)> = None;
        for (j, (g, c)) in inst.gts[img].iter().enumerate() {
            if *c != cat || taken[img][j] {
                continue;
            }
            let v = iou_oracle(&d, g);
            if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[img][j] = true;
            hits += 1;
        }
    }
    hits
}

/// 101-point interpolated AP for one category and threshold: at each recall
/// level, the best precision over all prefixes reaching that recall.
fn category_ap(inst: &ApInstance, cat: usize, thr: f64) -> Option<f64> {
    let n_gt = inst.gts.iter().flatten().filter(|g| g.1 == cat).count();
    if n_gt == 0 {
        return None;
    }
    let order = ranked(inst, cat);
    let points: Vec<(f64, f64)> = (1..=order.len())
        .map(|n| {
            let h = prefix_hits(inst, &order, n, cat, thr);
            (h as f64 / n_gt as f64, h as f64 / n as f64)
        })
        .collect();
    let mut sum = 0.0;
    for r in 0..101 {
        let level = r as f64 / 100.0;
        let best = points.iter().filter(|p| p.0 >= level).map(|p| p.1).fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
        if let Some(p) = best {
            sum += p;
        }
    }
    Some(sum / 101.0)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().fold(0.0, |s, x| s + x) / v.len() as f64
    }
}

/// `(per-threshold AP, mAP)`, categories with gts averaged first.
pub fn ap_oracle(inst: &ApInstance, thresholds: &[f64]) -> (Vec<f64>, f64) {
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&t| mean(&(0..2).filter_map(|c| category_ap(inst, c, t)).collect::<Vec<_>>()))
        .collect();
    let m = mean(&per);
    (per, m)
}

/// Prediction-guided assignment by rank counting: a bag member is among the
/// top `k` of its pseudo box iff fewer than `k` members beat it on quality
/// (lower proposal index wins ties). Conflicts go to the highest quality,
/// then the lower pseudo-box index.
pub fn pla_oracle(
    proposals: &[IBox],
    scores: &[Vec<f64>],
    regressed: &[IBox],
    pseudo: &[(IBox, usize)],
    t: f64,
    alpha: f64,
) -> Vec<Label> {
    let n = proposals.len();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; n];
    for (j, &(g, cat)) in pseudo.iter().enumerate() {
        let bag: Vec<usize> = (0..n).filter(|&i| iou_oracle(&proposals[i], &g) >= t).collect();
        if bag.is_empty() {
            continue;
        }
        let sum: f64 = bag.iter().map(|&i| iou_oracle(&proposals[i], &g)).sum();
        let k = (sum.floor() as usize).clamp(1, bag.len());
        let q = |i: usize| {
            let s: f64 = scores[i][cat];
            let u = iou_oracle(&regressed[i], &g);
            (s.powf(alpha) * u.powf(1.0 - alpha)).clamp(0.0, 1.0)
        };
        for &i in &bag {
            let beaten_by = bag.iter().filter(|&&o| q(o) > q(i) || (q(o) == q(i) && o < i)).count();
            if beaten_by < k && best[i].map_or(true, |(_, bq)| q(i) > bq) {
                best[i] = Some((j, q(i)));
            }
        }
    }
    best.into_iter().map(|b| b.map_or(Label::Negative, |(j, _)| Label::Positive(j))).collect()
}
