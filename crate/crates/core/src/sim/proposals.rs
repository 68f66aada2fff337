//! Synthetic region proposals and their feature vectors.
//!
//! A proposal's feature is a linear encoding of what a detector head needs to
//! know (regression deltas to the object it overlaps most, and an objectness
//! signal in the slot of that object's category) plus nuisance: a per-object
//! appearance offset, per-proposal noise, and an embedding of the pyramid level
//! the proposal is routed to. All encoding directions are orthonormal, so a
//! linear head can in principle undo the encoding exactly.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::noise::NoiseConfig;
use super::rng::{item_rng, stream_rng, Stream};
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::geometry::{encode_deltas, iou_unchecked, BBox};
use crate::msl::{fpn_level, LevelConfig};

pub const DEFAULT_FEATURE_DIM: usize = 32;
/// Proposals overlapping an object at least this much carry its signal.
pub const SIGNAL_IOU: f64 = 0.3;
/// Feature amplitude per unit of regression delta.
pub const DELTA_GAIN: f64 = 4.0;
/// Objectness amplitude per unit IoU in the category slot.
pub const CATEGORY_GAIN: f64 = 4.0;
/// Norm of each level embedding.
pub const LEVEL_EMBED_SCALE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    /// Feature at the scene's native scale.
    pub feature: Vec<f64>,
    /// Latent horizontal delta encoded in `feature`; mirrored under flips.
    pub(crate) latent_dx: f64,
    /// Pyramid level `feature` was rendered for.
    pub(crate) level: i32,
}

/// Fixed encoding directions of one synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureModel {
    pub dim: usize,
    pub n_categories: usize,
    pub level_cfg: LevelConfig,
    /// `delta_dirs[c]` encodes regression coordinate `c`.
    delta_dirs: [Vec<f64>; 4],
    /// `category_dirs[k]` carries objectness for category `k`.
    category_dirs: Vec<Vec<f64>>,
    level_dirs: BTreeMap<i32, Vec<f64>>,
}

fn orthonormal_set<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

impl FeatureModel {
    pub fn new(seed: u64, dim: usize, n_categories: usize) -> Result<Self> {
        let level_cfg = LevelConfig::default();
        let n_levels = (level_cfg.level_max - level_cfg.level_min + 1) as usize;
        let needed = 4 + n_categories + n_levels;
        if dim < needed {
            return Err(Error::Config(format!(
                "feature dimension {dim} too small for {n_categories} categories (need >= {needed})"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Features);
        let mut dirs = orthonormal_set(&mut rng, needed, dim).into_iter();
        let delta_dirs = [(); 4].map(|_| dirs.next().unwrap());
        let category_dirs: Vec<_> = (0..n_categories).map(|_| dirs.next().unwrap()).collect();
        let level_dirs = (level_cfg.level_min..=level_cfg.level_max)
            .map(|l| (l, dirs.next().unwrap().into_iter().map(|x| x * LEVEL_EMBED_SCALE).collect()))
            .collect();
        Ok(FeatureModel { dim, n_categories, level_cfg, delta_dirs, category_dirs, level_dirs })
    }

    pub fn delta_dir(&self, c: usize) -> &[f64] {
        &self.delta_dirs[c]
    }

    pub fn category_dir(&self, k: usize) -> &[f64] {
        &self.category_dirs[k]
    }

    pub fn level_dir(&self, level: i32) -> &[f64] {
        &self.level_dirs[&level]
    }

    /// Noise-free encoding of `bbox` against the objects of a scene.
    /// Returns the feature and its latent horizontal delta.
    pub fn encode(&self, bbox: &BBox, objects: &[(BBox, usize)], appearance: Option<&[Vec<f64>]>) -> (Vec<f64>, f64) {
        let mut f = vec![0.0; self.dim];
        let mut latent_dx = 0.0;
        let best = signal_object(bbox, objects);
        if let Some((j, v)) = best {
            let (g, cat) = objects[j];
            let d = encode_deltas(bbox, &g);
            latent_dx = d[0];
            for (c, dir) in self.delta_dirs.iter().enumerate() {
                axpy(&mut f, DELTA_GAIN * d[c], dir);
            }
            axpy(&mut f, CATEGORY_GAIN * v, &self.category_dirs[cat]);
            if let Some(app) = appearance {
                axpy(&mut f, 1.0, &app[j]);
            }
        }
        axpy(&mut f, 1.0, self.level_dir(fpn_level(bbox, &self.level_cfg)));
        (f, latent_dx)
    }

    /// Feature of `p` as seen in a view where its box became `view_box`
    /// (scaled and optionally mirrored).
    pub fn view_feature(&self, p: &Proposal, view_box: &BBox, hflip: bool) -> Vec<f64> {
        let mut f = p.feature.clone();
        if hflip {
            axpy(&mut f, -2.0 * DELTA_GAIN * p.latent_dx, &self.delta_dirs[0]);
        }
        let level = fpn_level(view_box, &self.level_cfg);
        if level != p.level {
            axpy(&mut f, -1.0, self.level_dir(p.level));
            axpy(&mut f, 1.0, self.level_dir(level));
        }
        f
    }
}

/// The object a proposal carries the signal of: its highest-IoU object (lower
/// index on ties) when that IoU reaches [`SIGNAL_IOU`].
pub(crate) fn signal_object(bbox: &BBox, objects: &[(BBox, usize)]) -> Option<(usize, f64)> {
    objects
        .iter()
        .enumerate()
        .map(|(j, (g, _))| (j, iou_unchecked(bbox, g)))
        .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((j, v)),
        })
        .filter(|&(_, v)| v >= SIGNAL_IOU)
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn clip_box(x1: f64, y1: f64, x2: f64, y2: f64, w: f64, h: f64) -> Option<BBox> {
    let (x1, x2) = (x1.min(x2).clamp(0.0, w), x1.max(x2).clamp(0.0, w));
    let (y1, y2) = (y1.min(y2).clamp(0.0, h), y1.max(y2).clamp(0.0, h));
    if x2 - x1 < 1.0 || y2 - y1 < 1.0 {
        return None;
    }
    BBox::new(x1, y1, x2, y2).ok()
}

/// Jittered copies of every object followed by random background boxes.
///
/// Draws come from a per-scene stream, so results do not depend on the order
/// scenes are processed in.
pub fn gen_proposals(scene: &Scene, noise: &NoiseConfig, model: &FeatureModel, seed: u64) -> Vec<Proposal> {
    let mut rng = item_rng(seed, Stream::Proposals, scene.id);
    let objects = scene.gt_pairs();
    // Appearance lives outside the regression subspace; localization noise
    // inside it is per proposal, scaled by the object's difficulty.
    let appearance: Vec<Vec<f64>> = objects
        .iter()
        .map(|_| {
            let mut a: Vec<f64> =
                (0..model.dim).map(|_| noise.appearance_sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            for dir in &model.delta_dirs {
                let dot: f64 = a.iter().zip(dir).map(|(x, y)| x * y).sum();
                axpy(&mut a, -dot, dir);
            }
            a
        })
        .collect();
    let difficulty: Vec<f64> = objects
        .iter()
        .map(|_| (noise.difficulty_sigma * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();

    let mut boxes = Vec::with_capacity(objects.len() * noise.jitter_copies + noise.background_rate);
    for (g, _) in &objects {
        for _ in 0..noise.jitter_copies {
            let spread = noise.box_jitter_sigma * (0.5 + 1.5 * rng.random::<f64>());
            let mut n = || -> f64 { rng.sample::<f64, _>(StandardNormal) * spread };
            let (dx1, dy1, dx2, dy2) = (n(), n(), n(), n());
            let cand = clip_box(
                g.x1 + dx1 * g.width(),
                g.y1 + dy1 * g.height(),
                g.x2 + dx2 * g.width(),
                g.y2 + dy2 * g.height(),
                scene.width,
                scene.height,
            );
            if let Some(b) = cand {
                boxes.push(b);
            }
        }
    }
    let max_side = 0.5 * scene.width.min(scene.height);
    for _ in 0..noise.background_rate {
        let side = (16f64.ln() + rng.random::<f64>() * (max_side.ln() - 16f64.ln())).exp();
        let aspect = (rng.random::<f64>() * 2.0 - 1.0) * std::f64::consts::LN_2;
        let (w, h) = (side * (0.5 * aspect).exp(), side * (-0.5 * aspect).exp());
        let x1 = rng.random::<f64>() * (scene.width - w).max(0.0);
        let y1 = rng.random::<f64>() * (scene.height - h).max(0.0);
        if let Some(b) = clip_box(x1, y1, x1 + w, y1 + h, scene.width, scene.height) {
            boxes.push(b);
        }
    }

    boxes
        .into_iter()
        .map(|bbox| {
            let (mut feature, latent_dx) = model.encode(&bbox, &objects, Some(&appearance));
            let signal = signal_object(&bbox, &objects);
            let hardness = signal.map_or(1.0, |(j, _)| difficulty[j]);
            if noise.feature_noise_sigma > 0.0 {
                for x in feature.iter_mut() {
                    *x += noise.feature_noise_sigma * hardness * rng.sample::<f64, _>(StandardNormal);
                }
            }
            if noise.delta_noise_sigma > 0.0 && signal.is_some() {
                for dir in &model.delta_dirs {
                    let e = DELTA_GAIN * noise.delta_noise_sigma * hardness * rng.sample::<f64, _>(StandardNormal);
                    axpy(&mut feature, e, dir);
                }
            }
            let level = fpn_level(&bbox, &model.level_cfg);
            Proposal { bbox, feature, latent_dx, level }
        })
        .collect()
}
