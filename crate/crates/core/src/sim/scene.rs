use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::{item_rng, stream_rng, Stream};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: BBox,
    pub category_id: usize,
}

/// A synthetic image. `objects` is the latent ground truth; training code may
/// only read it for labeled scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<Object>,
    pub split: Split,
}

impl Scene {
    pub fn gt_pairs(&self) -> Vec<(BBox, usize)> {
        self.objects.iter().map(|o| (o.bbox, o.category_id)).collect()
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

/// Log-uniform distribution of object side length (pixels) and aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleDist {
    pub min_side: f64,
    pub max_side: f64,
    pub max_aspect: f64,
}

impl Default for ScaleDist {
    fn default() -> Self {
        // Spans pyramid levels P2 through P5 for the default level rule.
        ScaleDist { min_side: 24.0, max_side: 600.0, max_aspect: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_categories: usize,
    pub labeled_fraction: f64,
    pub scale: ScaleDist,
    pub image_side: (f64, f64),
    pub objects_per_scene: (usize, usize),
}

impl DatasetSpec {
    pub fn new(seed: u64, n_scenes: usize, n_categories: usize, labeled_fraction: f64) -> Self {
        DatasetSpec {
            seed,
            n_scenes,
            n_categories,
            labeled_fraction,
            scale: ScaleDist::default(),
            image_side: (640.0, 1024.0),
            objects_per_scene: (1, 5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_categories: usize,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn labeled(&self) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(|s| s.split == Split::Labeled)
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(|s| s.split == Split::Unlabeled)
    }
}

/// Deterministic synthetic dataset. Scene `i` draws from its own stream, so
/// scene content does not depend on how many scenes are generated; the
/// labeled subset is a seeded permutation of exactly
/// `round(labeled_fraction * n_scenes)` scenes.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if !(spec.labeled_fraction > 0.0 && spec.labeled_fraction <= 1.0) {
        return Err(Error::invalid(format!("labeled fraction must be in (0,1], got {}", spec.labeled_fraction)));
    }
    if spec.n_categories == 0 {
        return Err(Error::invalid("at least one category is required"));
    }
    let s = spec.scale;
    if !(s.min_side > 0.0 && s.min_side <= s.max_side && s.max_aspect >= 1.0) {
        return Err(Error::invalid(format!("invalid scale distribution {s:?}")));
    }
    if !(spec.image_side.0 > 0.0 && spec.image_side.0 <= spec.image_side.1) {
        return Err(Error::invalid("invalid image side range"));
    }
    if spec.objects_per_scene.0 > spec.objects_per_scene.1 {
        return Err(Error::invalid("invalid objects-per-scene range"));
    }

    let mut scenes: Vec<Scene> = (0..spec.n_scenes).map(|i| gen_scene(spec, i as u64)).collect();

    let n_labeled = (spec.labeled_fraction * spec.n_scenes as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_scenes).collect();
    order.shuffle(&mut stream_rng(spec.seed, Stream::Data));
    for &i in order.iter().take(n_labeled) {
        scenes[i].split = Split::Labeled;
    }
    Ok(Dataset { n_categories: spec.n_categories, scenes })
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn gen_scene(spec: &DatasetSpec, id: u64) -> Scene {
    let mut rng = item_rng(spec.seed, Stream::Data, id);
    let width = rng.random_range(spec.image_side.0..=spec.image_side.1).round();
    let height = rng.random_range(spec.image_side.0..=spec.image_side.1).round();
    let n_obj = rng.random_range(spec.objects_per_scene.0..=spec.objects_per_scene.1);
    let mut objects: Vec<Object> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        // Rejection-sample placements that do not overlap existing objects much.
        for _attempt in 0..20 {
            let side = log_uniform(&mut rng, spec.scale.min_side, spec.scale.max_side);
            let aspect = log_uniform(&mut rng, 1.0 / spec.scale.max_aspect, spec.scale.max_aspect);
            let w = (side * aspect.sqrt()).min(width - 2.0);
            let h = (side / aspect.sqrt()).min(height - 2.0);
            let x1 = rng.random::<f64>() * (width - w);
            let y1 = rng.random::<f64>() * (height - h);
            let category_id = rng.random_range(0..spec.n_categories);
            let Ok(bbox) = BBox::new(x1, y1, x1 + w, y1 + h) else { continue };
            if objects.iter().all(|o| iou_unchecked(&o.bbox, &bbox) < 0.3) {
                objects.push(Object { bbox, category_id });
                break;
            }
        }
    }
    Scene { id, width, height, objects, split: Split::Unlabeled }
}
