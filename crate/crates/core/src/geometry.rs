//! Axis-aligned box arithmetic.
//!
//! Boxes are stored in continuous corner form `(x1, y1, x2, y2)` with
//! `area = (x2 - x1) * (y2 - y1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default IoU threshold for suppression.
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and non-positive extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.x1.is_finite() && self.y1.is_finite() && self.x2.is_finite() && self.y2.is_finite();
        if !finite {
            return Err(Error::invalid(format!("non-finite box {:?}", self.to_array())));
        }
        if !(self.x2 > self.x1 && self.y2 > self.y1) {
            return Err(Error::invalid(format!("degenerate box {:?}", self.to_array())));
        }
        Ok(())
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Converts to COCO `(x, y, w, h)`.
    pub fn to_xywh(self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn from_xywh(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[0] + c[2], c[1] + c[3])
    }
}

fn raw_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(raw_iou(a, b))
}

/// IoU for boxes already known to be valid (constructed through [`BBox::new`]).
#[inline]
pub fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    raw_iou(a, b)
}

/// Row-major `|a| x |b|` IoU matrix.
pub fn iou_matrix(a: &[BBox], b: &[BBox]) -> Result<Vec<Vec<f64>>> {
    for bx in a.iter().chain(b) {
        bx.validate()?;
    }
    Ok(a.iter().map(|x| b.iter().map(|y| raw_iou(x, y)).collect()).collect())
}

/// Indices sorted by descending score; equal scores keep the lower index first.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in descending score order.
///
/// A box is suppressed when its IoU with an already kept box is `>= iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::invalid(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    for b in boxes {
        b.validate()?;
    }
    let order = score_order(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && raw_iou(&boxes[i], &boxes[j]) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}

/// Scales a box about the origin and optionally mirrors it horizontally.
///
/// The flip is applied after scaling, against `image_width` (the width of the
/// image the box lives in after scaling).
pub fn transform_box(b: &BBox, scale: f64, hflip: bool, image_width: f64) -> Result<BBox> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    b.validate()?;
    let (mut x1, y1, mut x2, y2) = (b.x1 * scale, b.y1 * scale, b.x2 * scale, b.y2 * scale);
    if hflip {
        if !(image_width > 0.0) {
            return Err(Error::invalid(format!("image width must be positive, got {image_width}")));
        }
        let (f1, f2) = (image_width - x2, image_width - x1);
        x1 = f1;
        x2 = f2;
    }
    BBox::new(x1, y1, x2, y2)
}

/// Regression deltas `(dx, dy, dw, dh)` taking `from` onto `to`:
/// center offsets scaled by the source size, log size ratios.
pub fn encode_deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [
        (tx - fx) / from.width(),
        (ty - fy) / from.height(),
        (to.width() / from.width()).ln(),
        (to.height() / from.height()).ln(),
    ]
}

/// Largest log-size delta applied when decoding; keeps `exp` finite.
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Inverse of [`encode_deltas`]. Size deltas are clamped to `MAX_LOG_DELTA`.
pub fn decode_deltas(from: &BBox, d: &[f64; 4]) -> Result<BBox> {
    let (fx, fy) = from.center();
    let cx = fx + d[0] * from.width();
    let cy = fy + d[1] * from.height();
    let w = from.width() * d[2].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    let h = from.height() * d[3].clamp(-MAX_LOG_DELTA, MAX_LOG_DELTA).exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_fixtures() {
        assert_eq!(iou(&b(0., 0., 10., 10.), &b(0., 0., 10., 10.)).unwrap(), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 6., 6.)).unwrap(), 0.0);
        let v = iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0., 0., 0., 1.).is_err());
        assert!(BBox::new(0., 0., 1., f64::NAN).is_err());
        let bad = BBox { x1: 2.0, y1: 0.0, x2: 1.0, y2: 1.0 };
        assert!(matches!(iou(&bad, &b(0., 0., 1., 1.)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn touching_boxes_have_zero_iou() {
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(1., 0., 2., 1.)).unwrap(), 0.0);
    }

    #[test]
    fn iou_matrix_fixtures() {
        let one = vec![b(0., 0., 4., 4.)];
        assert_eq!(iou_matrix(&one, &one).unwrap(), vec![vec![1.0]]);

        let two = vec![b(0., 0., 1., 1.), b(5., 5., 6., 6.)];
        assert_eq!(iou_matrix(&two, &two).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);

        let m = iou_matrix(&[b(0., 0., 2., 2.)], &[b(1., 1., 3., 3.), b(0., 0., 2., 2.)]).unwrap();
        assert!((m[0][0] - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(m[0][1], 1.0);

        assert!(iou_matrix(&[], &two).unwrap().is_empty());
        assert_eq!(iou_matrix(&two, &[]).unwrap(), vec![Vec::<f64>::new(); 2]);
    }

    #[test]
    fn nms_fixtures() {
        assert_eq!(nms(&[b(0., 0., 1., 1.)], &[0.3], 0.5).unwrap(), vec![0]);

        let same = [b(0., 0., 4., 4.), b(0., 0., 4., 4.)];
        assert_eq!(nms(&same, &[0.9, 0.8], 0.5).unwrap(), vec![0]);

        let disjoint = [b(0., 0., 1., 1.), b(5., 5., 6., 6.)];
        assert_eq!(nms(&disjoint, &[0.2, 0.7], 0.5).unwrap(), vec![1, 0]);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let same = [b(0., 0., 4., 4.), b(0., 0., 4., 4.)];
        assert_eq!(nms(&same, &[0.5, 0.5], 0.5).unwrap(), vec![0]);
    }

    #[test]
    fn nms_length_mismatch() {
        assert!(nms(&[b(0., 0., 1., 1.)], &[0.1, 0.2], 0.5).is_err());
    }

    #[test]
    fn transform_fixtures() {
        let a = b(1., 2., 3., 5.);
        assert_eq!(transform_box(&a, 1.0, false, 10.0).unwrap(), a);
        assert_eq!(transform_box(&b(0., 0., 10., 10.), 0.5, false, 10.0).unwrap(), b(0., 0., 5., 5.));
        assert_eq!(transform_box(&b(2., 0., 4., 4.), 1.0, true, 10.0).unwrap(), b(6., 0., 8., 4.));
    }

    #[test]
    fn transform_rejects_bad_scale() {
        assert!(transform_box(&b(0., 0., 1., 1.), 0.0, false, 1.0).is_err());
        assert!(transform_box(&b(0., 0., 1., 1.), -2.0, false, 1.0).is_err());
    }

    #[test]
    fn transform_underflow_is_degenerate() {
        assert!(transform_box(&b(0., 0., 1e-300, 1.), 1e-300, false, 1.0).is_err());
    }

    #[test]
    fn deltas_round_trip() {
        let p = b(10., 20., 50., 60.);
        let g = b(12., 18., 70., 55.);
        let d = encode_deltas(&p, &g);
        let back = decode_deltas(&p, &d).unwrap();
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(decode_deltas(&p, &[0.0; 4]).unwrap(), p);
    }

    #[test]
    fn xywh_conversion() {
        let a = b(1., 2., 4., 8.);
        assert_eq!(a.to_xywh(), [1., 2., 3., 6.]);
        assert_eq!(BBox::from_xywh(a.to_xywh()).unwrap(), a);
    }
}
