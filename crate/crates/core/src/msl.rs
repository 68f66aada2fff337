//! Multi-view scale-invariant learning.
//!
//! View `V1` rescales the teacher view by a random ratio and is supervised by
//! the rescaled pseudo boxes. View `V2` is `V1` downsampled by an even factor;
//! since adjacent pyramid levels differ by 2x in stride, level `l + 1` of `V1`
//! lines up spatially with level `l` of `V2`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_box, BBox};

pub const DEFAULT_RESIZE_RANGE: (f64, f64) = (0.8, 1.3);
pub const DEFAULT_DOWNSAMPLE: u32 = 2;
/// Levels rendered per view; V1's P3-P7 then pair with V2's P2-P6.
pub const DEFAULT_PYRAMID_LEVELS: std::ops::RangeInclusive<u8> = 2..=7;
/// Boxes whose area falls below this after scaling are dropped.
pub const MIN_VIEW_AREA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub resize_ratio: f64,
    pub downsample_factor: u32,
    pub hflip: bool,
}

impl ViewSpec {
    pub fn validate(&self, range: (f64, f64)) -> Result<()> {
        if !(self.resize_ratio >= range.0 && self.resize_ratio <= range.1) {
            return Err(Error::invalid(format!(
                "resize ratio {} outside [{}, {}]",
                self.resize_ratio, range.0, range.1
            )));
        }
        if self.downsample_factor == 0 || self.downsample_factor % 2 != 0 {
            return Err(Error::invalid(format!(
                "downsample factor must be a positive even integer, got {}",
                self.downsample_factor
            )));
        }
        Ok(())
    }
}

/// Uniform draw from `[lo, hi]`. Always consumes exactly one `f64` from `rng`.
pub fn sample_resize_ratio<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Result<f64> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::invalid(format!("invalid resize range [{lo}, {hi}]")));
    }
    let u: f64 = rng.random();
    Ok(if lo == hi { lo } else { lo + u * (hi - lo) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub v1: View,
    pub v2: View,
    /// Input indices of the boxes present in both views, in order.
    pub kept: Vec<usize>,
    /// Boxes that degenerated in either view.
    pub dropped: usize,
}

/// Builds `V1` (resize, optional flip) and `V2` (`V1` downsampled).
pub fn make_views(dims: (f64, f64), boxes: &[BBox], spec: &ViewSpec) -> Result<ViewPair> {
    if !(spec.resize_ratio > 0.0) || spec.downsample_factor == 0 || spec.downsample_factor % 2 != 0 {
        return Err(Error::invalid(format!("invalid view spec {spec:?}")));
    }
    let (w, h) = dims;
    let (w1, h1) = (w * spec.resize_ratio, h * spec.resize_ratio);
    let down = 1.0 / spec.downsample_factor as f64;
    let (w2, h2) = (w1 * down, h1 * down);

    let mut v1 = Vec::with_capacity(boxes.len());
    let mut v2 = Vec::with_capacity(boxes.len());
    let mut kept = Vec::with_capacity(boxes.len());
    let mut dropped = 0;
    for (i, b) in boxes.iter().enumerate() {
        let b1 = transform_box(b, spec.resize_ratio, spec.hflip, w1).ok().filter(|b| b.area() >= MIN_VIEW_AREA);
        let b2 = b1.and_then(|b1| transform_box(&b1, down, false, w2).ok()).filter(|b| b.area() >= MIN_VIEW_AREA);
        match (b1, b2) {
            (Some(b1), Some(b2)) => {
                v1.push(b1);
                v2.push(b2);
                kept.push(i);
            }
            _ => dropped += 1,
        }
    }
    Ok(ViewPair {
        v1: View { width: w1, height: h1, boxes: v1 },
        v2: View { width: w2, height: h2, boxes: v2 },
        kept,
        dropped,
    })
}

/// Constants of the box-to-pyramid-level rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub k0: i32,
    pub s0: f64,
    pub level_min: i32,
    pub level_max: i32,
}

impl Default for LevelConfig {
    fn default() -> Self {
        LevelConfig { k0: 4, s0: 224.0, level_min: 2, level_max: 6 }
    }
}

/// `floor(log2(r))` for finite `r > 0`, exact at powers of two.
fn floor_log2(r: f64) -> i32 {
    let mut e = r.log2().floor() as i32;
    if 2f64.powi(e) > r {
        e -= 1;
    } else if 2f64.powi(e + 1) <= r {
        e += 1;
    }
    e
}

/// Unclamped level `floor(k0 + log2(sqrt(area) / s0))`.
pub fn raw_fpn_level(b: &BBox, cfg: &LevelConfig) -> i32 {
    cfg.k0 + floor_log2(b.area().sqrt() / cfg.s0)
}

/// Pyramid level a box is routed to, clamped to `[level_min, level_max]`.
pub fn fpn_level(b: &BBox, cfg: &LevelConfig) -> i32 {
    raw_fpn_level(b, cfg).clamp(cfg.level_min, cfg.level_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Grid { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }

    fn crop(&self, h: usize, w: usize) -> Grid {
        let mut out = Grid::zeros(h, w, self.c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..self.c {
                    *out.at_mut(y, x, ch) = self.at(y, x, ch);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<u8, Grid>,
}

impl FeaturePyramid {
    /// Checks the halving rule between consecutive levels and a constant channel count.
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<(u8, &Grid)> = None;
        for (&l, g) in &self.levels {
            if g.data.len() != g.h * g.w * g.c {
                return Err(Error::invalid(format!("level P{l}: data length does not match shape")));
            }
            if let Some((pl, pg)) = prev {
                if l != pl + 1 {
                    return Err(Error::invalid(format!("pyramid levels skip from P{pl} to P{l}")));
                }
                if g.h != pg.h.div_ceil(2) || g.w != pg.w.div_ceil(2) || g.c != pg.c {
                    return Err(Error::invalid(format!("level P{l} does not halve P{pl}")));
                }
            }
            prev = Some((l, g));
        }
        Ok(())
    }
}

/// Pixel extent of a view, rounded up.
pub fn pixel_dims(width: f64, height: f64) -> (usize, usize) {
    (width.ceil().max(1.0) as usize, height.ceil().max(1.0) as usize)
}

/// Synthetic pyramid for a view: each object paints a Gaussian bump on the
/// level it is routed to, centered on its box, in the channel of its
/// category. The content is a pure function of the boxes, so two views
/// related by a 2x downsample produce matching grids on shifted levels.
pub fn render_pyramid(
    pixel_dims: (usize, usize),
    objects: &[(BBox, usize)],
    levels: std::ops::RangeInclusive<u8>,
    channels: usize,
    level_cfg: &LevelConfig,
) -> FeaturePyramid {
    let (pw, ph) = pixel_dims;
    let mut out = BTreeMap::new();
    for l in levels {
        let stride = 2f64.powi(l as i32);
        let div = 1usize << l;
        let mut g = Grid::zeros(ph.div_ceil(div), pw.div_ceil(div), channels);
        for (b, cat) in objects {
            if fpn_level(b, level_cfg) != l as i32 {
                continue;
            }
            let (cx, cy) = b.center();
            let (cx, cy) = (cx / stride, cy / stride);
            let sx = (b.width() / stride / 4.0).max(0.5);
            let sy = (b.height() / stride / 4.0).max(0.5);
            for y in 0..g.h {
                let dy = (y as f64 + 0.5 - cy) / sy;
                for x in 0..g.w {
                    let dx = (x as f64 + 0.5 - cx) / sx;
                    let v = (-0.5 * (dx * dx + dy * dy)).exp();
                    for ch in 0..channels {
                        let wgt = if ch == cat % channels { 1.0 } else { 0.25 };
                        *g.at_mut(y, x, ch) += wgt * v;
                    }
                }
            }
        }
        out.insert(l, g);
    }
    FeaturePyramid { levels: out }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub level_v1: u8,
    pub level_v2: u8,
    pub v1: Grid,
    pub v2: Grid,
}

/// Pairs level `l + 1` of `p1` with level `l` of `p2` for every `l` present in
/// `p2` whose partner exists in `p1`. Shapes may differ by one cell from ceil
/// rounding, in which case both grids are cropped to the common extent.
pub fn align_pyramids(p1: &FeaturePyramid, p2: &FeaturePyramid) -> Result<Vec<AlignedPair>> {
    let mut pairs = Vec::new();
    for (&l2, g2) in &p2.levels {
        let Some(g1) = p1.levels.get(&(l2 + 1)) else { continue };
        let ok = g1.c == g2.c && g1.h.abs_diff(g2.h) <= 1 && g1.w.abs_diff(g2.w) <= 1;
        if !ok {
            return Err(Error::invalid(format!(
                "P{} of V1 {:?} does not align with P{} of V2 {:?}",
                l2 + 1,
                g1.shape(),
                l2,
                g2.shape()
            )));
        }
        let (h, w) = (g1.h.min(g2.h), g1.w.min(g2.w));
        pairs.push(AlignedPair { level_v1: l2 + 1, level_v2: l2, v1: g1.crop(h, w), v2: g2.crop(h, w) });
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no pyramid levels could be aligned"));
    }
    Ok(pairs)
}

/// Mean over pairs of the mean squared elementwise difference.
pub fn feature_consistency_loss(pairs: &[AlignedPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let n = p.v1.data.len().max(1) as f64;
            p.v1.data.iter().zip(&p.v2.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
        })
        .sum();
    total / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn resize_ratio_degenerate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_resize_ratio(&mut rng, 1.0, 1.0).unwrap(), 1.0);
        assert!(sample_resize_ratio(&mut rng, 1.3, 0.8).is_err());
        assert!(sample_resize_ratio(&mut rng, 0.0, 1.0).is_err());
    }

    #[test]
    fn resize_ratio_uniform_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (lo, hi) = DEFAULT_RESIZE_RANGE;
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let r = sample_resize_ratio(&mut rng, lo, hi).unwrap();
            assert!((lo..=hi).contains(&r));
            sum += r;
        }
        assert!((sum / n as f64 - 0.5 * (lo + hi)).abs() < 0.01);
    }

    #[test]
    fn views_identity_ratio() {
        let boxes = [b(10., 10., 50., 30.)];
        let spec = ViewSpec { resize_ratio: 1.0, downsample_factor: 2, hflip: false };
        let v = make_views((100., 100.), &boxes, &spec).unwrap();
        assert_eq!(v.v1.boxes, boxes.to_vec());
        assert_eq!(v.v2.boxes, vec![b(5., 5., 25., 15.)]);
        assert_eq!((v.v2.width, v.v2.height), (50., 50.));
    }

    #[test]
    fn views_upscale() {
        let spec = ViewSpec { resize_ratio: 1.3, downsample_factor: 2, hflip: false };
        let v = make_views((200., 200.), &[b(0., 0., 100., 100.)], &spec).unwrap();
        assert_eq!(v.v1.boxes, vec![b(0., 0., 130., 130.)]);
    }

    #[test]
    fn views_compose() {
        let spec = ViewSpec { resize_ratio: 0.93, downsample_factor: 2, hflip: true };
        let boxes = [b(3., 4., 40., 41.), b(60., 2., 99., 17.)];
        let v = make_views((100., 50.), &boxes, &spec).unwrap();
        for (a, c) in v.v1.boxes.iter().zip(&v.v2.boxes) {
            assert_eq!(transform_box(a, 0.5, false, v.v2.width).unwrap(), *c);
            assert_eq!(transform_box(c, 2.0, false, v.v1.width).unwrap(), *a);
        }
    }

    #[test]
    fn views_drop_tiny_boxes() {
        let spec = ViewSpec { resize_ratio: 1.0, downsample_factor: 2, hflip: false };
        let v = make_views((10., 10.), &[b(0., 0., 0.03, 0.03), b(1., 1., 5., 5.)], &spec).unwrap();
        assert_eq!(v.dropped, 1);
        assert_eq!(v.kept, vec![1]);
    }

    #[test]
    fn view_spec_validation() {
        let s = ViewSpec { resize_ratio: 1.4, downsample_factor: 2, hflip: false };
        assert!(s.validate(DEFAULT_RESIZE_RANGE).is_err());
        let s = ViewSpec { resize_ratio: 1.0, downsample_factor: 3, hflip: false };
        assert!(s.validate(DEFAULT_RESIZE_RANGE).is_err());
        assert!(make_views((1., 1.), &[], &s).is_err());
    }

    #[test]
    fn level_fixtures() {
        let cfg = LevelConfig::default();
        assert_eq!(fpn_level(&b(0., 0., 224., 224.), &cfg), 4);
        assert_eq!(fpn_level(&b(0., 0., 112., 112.), &cfg), 3);
        assert_eq!(fpn_level(&b(0., 0., 8., 8.), &cfg), 2);
        assert_eq!(fpn_level(&b(0., 0., 4000., 4000.), &cfg), 6);
    }

    #[test]
    fn floor_log2_exact() {
        for e in -20..20 {
            let p = 2f64.powi(e);
            assert_eq!(floor_log2(p), e);
            assert_eq!(floor_log2(p * (1.0 - f64::EPSILON)), e - 1);
        }
    }

    #[test]
    fn pyramid_shapes_and_alignment() {
        let cfg = LevelConfig { level_max: 7, ..Default::default() };
        let p1 = render_pyramid((256, 256), &[], 2..=7, 3, &cfg);
        p1.validate().unwrap();
        assert_eq!(p1.levels[&3].shape(), (32, 32, 3));
        let p2 = render_pyramid((128, 128), &[], 2..=7, 3, &cfg);
        assert_eq!(p2.levels[&2].shape(), (32, 32, 3));
        let pairs = align_pyramids(&p1, &p2).unwrap();
        assert_eq!(pairs.len(), 5);
        assert!(pairs.iter().all(|p| p.v1.shape() == p.v2.shape()));
        assert_eq!(pairs[0].level_v1, 3);
        assert_eq!(pairs[0].level_v2, 2);
    }

    #[test]
    fn identical_pyramids_do_not_align() {
        let cfg = LevelConfig::default();
        let p = render_pyramid((256, 256), &[], 2..=7, 2, &cfg);
        assert!(matches!(align_pyramids(&p, &p), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn consistency_fixtures() {
        let g = Grid { h: 2, w: 2, c: 1, data: vec![1.0, 2.0, 3.0, 4.0] };
        let same = AlignedPair { level_v1: 3, level_v2: 2, v1: g.clone(), v2: g.clone() };
        assert_eq!(feature_consistency_loss(&[same]), 0.0);

        let shifted = Grid { data: g.data.iter().map(|v| v + 0.5).collect(), ..g.clone() };
        let pair = AlignedPair { level_v1: 3, level_v2: 2, v1: g.clone(), v2: shifted.clone() };
        assert_eq!(feature_consistency_loss(&[pair]), 0.25);
        let swapped = AlignedPair { level_v1: 3, level_v2: 2, v1: shifted, v2: g };
        assert_eq!(feature_consistency_loss(&[swapped]), 0.25);
    }

    #[test]
    fn rendered_views_agree_on_shifted_levels() {
        let cfg = LevelConfig { level_max: 7, ..Default::default() };
        let spec = ViewSpec { resize_ratio: 1.0, downsample_factor: 2, hflip: false };
        // Both boxes sit on levels 3-4 in V1, away from the clamp.
        let boxes = [b(20., 30., 180., 190.), b(200., 200., 500., 480.)];
        let v = make_views((512., 512.), &boxes, &spec).unwrap();
        let objs1: Vec<_> = v.v1.boxes.iter().map(|b| (*b, 0)).collect();
        let objs2: Vec<_> = v.v2.boxes.iter().map(|b| (*b, 0)).collect();
        let p1 = render_pyramid(pixel_dims(v.v1.width, v.v1.height), &objs1, 2..=7, 2, &cfg);
        let p2 = render_pyramid(pixel_dims(v.v2.width, v.v2.height), &objs2, 2..=7, 2, &cfg);
        let pairs = align_pyramids(&p1, &p2).unwrap();
        assert_eq!(feature_consistency_loss(&pairs), 0.0);
    }
}
