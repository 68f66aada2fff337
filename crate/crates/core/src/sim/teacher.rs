//! A synthetic teacher with a controllable error model.
//!
//! Stands in for a trained detector when the diagnostics need teacher
//! predictions whose noise is known: every object gets a latent localization
//! difficulty that scales the corner noise of all regressed boxes pointing at
//! it, and class confidence rises with how well the proposal covers the object.

use rand::Rng;
use rand_distr::StandardNormal;

use super::detector::Prediction;
use super::noise::NoiseConfig;
use super::proposals::SIGNAL_IOU;
use super::rng::{item_rng, Stream};
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::losses::sigmoid;

/// Logit of the true category for a proposal with IoU 0.5 and average confidence.
const FG_LOGIT_AT_HALF: f64 = 1.0;
/// Logit slope per unit of proposal IoU.
const FG_LOGIT_SLOPE: f64 = 8.0;
/// Mean logit of categories a proposal does not show.
const BG_LOGIT: f64 = -4.0;

/// `around` with corner offsets `(bias_i * b + e_i * (1 - b)) * scale`, where
/// `b` and `1 - b` are the standard deviations' shares of the unit variance.
fn noisy_box<R: Rng>(rng: &mut R, around: &BBox, bias: &[f64; 4], share: f64, sx: f64, sy: f64) -> BBox {
    let (wb, we) = (share.sqrt(), (1.0 - share).sqrt());
    let mut n = |i: usize| wb * bias[i] + we * rng.sample::<f64, _>(StandardNormal);
    let (a, b, c, d) = (n(0), n(1), n(2), n(3));
    let x1 = around.x1 + a * sx;
    let x2 = around.x2 + b * sx;
    let y1 = around.y1 + c * sy;
    let y2 = around.y2 + d * sy;
    let (x1, x2) = (x1.min(x2), x1.max(x2).max(x1.min(x2) + 1.0));
    let (y1, y2) = (y1.min(y2), y1.max(y2).max(y1.min(y2) + 1.0));
    BBox { x1, y1, x2, y2 }
}

/// Predictions of the synthetic teacher on `proposals` of `scene`.
pub fn synthetic_teacher(
    scene: &Scene,
    proposals: &[BBox],
    n_categories: usize,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Vec<Prediction>> {
    if scene.objects.iter().any(|o| o.category_id >= n_categories) {
        return Err(Error::invalid("scene category exceeds the teacher's category count"));
    }
    let mut rng = item_rng(seed, Stream::Teacher, scene.id);
    let per_object: Vec<(f64, f64, [f64; 4])> = scene
        .objects
        .iter()
        .map(|_| {
            let difficulty = (noise.difficulty_sigma * rng.sample::<f64, _>(StandardNormal)).exp();
            let confidence = 0.5 * rng.sample::<f64, _>(StandardNormal);
            let bias = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
            (difficulty, confidence, bias)
        })
        .collect();

    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        let best = scene
            .objects
            .iter()
            .enumerate()
            .map(|(j, o)| (j, iou_unchecked(p, &o.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        let mut probs: Vec<f64> = (0..n_categories)
            .map(|_| sigmoid(BG_LOGIT + noise.score_noise_sigma * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let regressed_box = match best {
            Some((j, v)) if v >= SIGNAL_IOU => {
                let obj = &scene.objects[j];
                let (difficulty, confidence, bias) = per_object[j];
                let spread = noise.teacher_reg_sigma * difficulty * (1.5 - v);
                let logit = FG_LOGIT_AT_HALF
                    + FG_LOGIT_SLOPE * (v - 0.5)
                    + confidence
                    + noise.score_noise_sigma * rng.sample::<f64, _>(StandardNormal);
                probs[obj.category_id] = sigmoid(logit);
                noisy_box(&mut rng, &obj.bbox, &bias, noise.teacher_bias_share, spread * obj.bbox.width(), spread * obj.bbox.height())
            }
            _ => noisy_box(&mut rng, p, &[0.0; 4], 0.0, 0.05 * p.width(), 0.05 * p.height()),
        };
        out.push(Prediction { category_probs: probs, regressed_box });
    }
    Ok(out)
}
