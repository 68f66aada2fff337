//! A dataset bound to its proposals and feature encoding, plus inference and
//! evaluation helpers.

use super::detector::{detector_forward, DetectorParams, Prediction};
use super::noise::NoiseConfig;
use super::proposals::{gen_proposals, FeatureModel, Proposal};
use super::rng::derive_seed;
use super::scene::{gen_dataset, Dataset, DatasetSpec};
use crate::error::Result;
use crate::io::config::TrainConfig;
use crate::eval::{average_precision, coco_iou_thresholds, ApResult};
use crate::geometry::BBox;
use crate::pseudo::{generate_pseudo_labels, Detection};

/// Minimum score for a detection to be reported at evaluation time.
pub const EVAL_MIN_SCORE: f64 = 0.05;
pub const EVAL_MAX_DETS: usize = 100;
const EVAL_SALT: u64 = 0xE7A1;

#[derive(Debug, Clone)]
pub struct World {
    pub data: Dataset,
    pub noise: NoiseConfig,
    pub model: FeatureModel,
    /// `proposals[i]` belongs to `data.scenes[i]`.
    pub proposals: Vec<Vec<Proposal>>,
    pub seed: u64,
}

impl World {
    pub fn build(data: Dataset, noise: NoiseConfig, feature_dim: usize, seed: u64) -> Result<World> {
        noise.validate()?;
        let model = FeatureModel::new(seed, feature_dim, data.n_categories)?;
        let proposals = data.scenes.iter().map(|s| gen_proposals(s, &noise, &model, seed)).collect();
        Ok(World { data, noise, model, proposals, seed })
    }

    /// The synthetic dataset a config describes, with its proposals.
    pub fn from_config(cfg: &TrainConfig) -> Result<World> {
        let data = gen_dataset(&DatasetSpec::new(cfg.seed, cfg.scenes, cfg.categories, cfg.labeled_fraction))?;
        World::build(data, cfg.noise_config()?, cfg.feature_dim, cfg.seed)
    }

    /// Held-out scenes for evaluation: same categories and encoding, disjoint scene draws.
    pub fn eval_world(&self, n_scenes: usize) -> Result<World> {
        let spec = DatasetSpec::new(derive_seed(self.seed, EVAL_SALT), n_scenes, self.data.n_categories, 1.0);
        let data = gen_dataset(&spec)?;
        let proposals = data
            .scenes
            .iter()
            .map(|s| gen_proposals(s, &self.noise, &self.model, derive_seed(self.seed, EVAL_SALT)))
            .collect();
        Ok(World { data, noise: self.noise, model: self.model.clone(), proposals, seed: self.seed })
    }

    pub fn boxes(&self, scene: usize) -> Vec<BBox> {
        self.proposals[scene].iter().map(|p| p.bbox).collect()
    }

    pub fn features(&self, scene: usize) -> Vec<Vec<f64>> {
        self.proposals[scene].iter().map(|p| p.feature.clone()).collect()
    }

    pub fn predict(&self, params: &DetectorParams, scene: usize) -> Result<Vec<Prediction>> {
        detector_forward(params, &self.boxes(scene), &self.features(scene))
    }
}

/// One detection per (proposal, category), class-wise NMS, score filter, and
/// a per-image cap.
pub fn predictions_to_detections(preds: &[Prediction], min_score: f64, nms_iou: f64, max_dets: usize) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = preds
        .iter()
        .flat_map(|p| {
            p.category_probs
                .iter()
                .enumerate()
                .map(move |(k, &s)| Detection { bbox: p.regressed_box, category_id: k, score: s })
        })
        .filter(|d| d.score >= min_score)
        .collect();
    let mut kept = generate_pseudo_labels(&dets, min_score, nms_iou)?;
    kept.truncate(max_dets);
    Ok(kept
        .into_iter()
        .map(|p| Detection { bbox: p.bbox, category_id: p.category_id, score: p.score })
        .collect())
}

/// COCO-style mAP of `params` over every scene of `world`, against latent truth.
pub fn evaluate(params: &DetectorParams, world: &World, nms_iou: f64) -> Result<ApResult> {
    let mut dets = Vec::with_capacity(world.data.scenes.len());
    let mut gts = Vec::with_capacity(world.data.scenes.len());
    for (i, scene) in world.data.scenes.iter().enumerate() {
        let preds = world.predict(params, i)?;
        dets.push(predictions_to_detections(&preds, EVAL_MIN_SCORE, nms_iou, EVAL_MAX_DETS)?);
        gts.push(scene.gt_pairs());
    }
    average_precision(&dets, &gts, &coco_iou_thresholds())
}
