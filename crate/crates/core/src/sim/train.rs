//! Supervised and semi-supervised training loops over a [`World`].
//!
//! Every step draws labeled scenes and trains on them with focal
//! classification and L1 regression against their ground truth. In
//! semi-supervised mode, after burn-in, each step also draws unlabeled scenes;
//! the EMA teacher labels them on a weakly augmented view, pseudo boxes are
//! assigned to the shared proposals by prediction-guided assignment and
//! weighted by consistency votes, and the student learns from a resized view
//! and its downsampled copy. The unlabeled loss enters the update scaled by
//! `beta`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::detector::{ema_update, regression_target, sgd_step, DetectorParams, Prediction};
use super::rng::{stream_rng, Stream};
use super::scene::Split;
use super::world::{evaluate, World};
use crate::assignment::{iou_assign, pla_assign, AssignmentResult, Label, PlaOptions};
use crate::error::{Error, Result};
use crate::eval::{assignment_quality, pearson, ApResult, AssignmentQuality};
use crate::geometry::{transform_box, BBox};
use crate::io::config::{TrainConfig, UnsupReg};
use crate::losses::{focal_from_logit, weighted_l1_reg, LossReport};
use crate::msl::{feature_consistency_loss, make_views, raw_fpn_level, sample_resize_ratio, AlignedPair, Grid, ViewSpec};
use crate::pcv::attach_sigma;
use crate::pseudo::{best_true_ious, generate_pseudo_labels, Detection, PseudoLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Supervised,
    Pseco,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossReport,
    /// Teacher mAP, on evaluation steps only.
    pub map: Option<f64>,
    /// False-positive rate of this step's pseudo-box assignment against latent truth.
    pub fp_rate: Option<f64>,
    /// Correlation of this step's consistency votes with true pseudo-box IoU.
    pub sigma_pearson: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub metrics: Vec<StepRecord>,
    /// Evaluation of the final teacher; `None` when there were no steps.
    pub final_ap: Option<ApResult>,
    /// Unlabeled images whose teacher and student consumed the same proposals.
    pub shared_proposal_checks: usize,
}

pub fn train_supervised(cfg: &TrainConfig, world: &World) -> Result<TrainOutcome> {
    run(cfg, world, Mode::Supervised)
}

pub fn train_pseco(cfg: &TrainConfig, world: &World) -> Result<TrainOutcome> {
    run(cfg, world, Mode::Pseco)
}

pub fn train(cfg: &TrainConfig, world: &World, mode: Mode) -> Result<TrainOutcome> {
    run(cfg, world, mode)
}

struct Rngs {
    labeled_sampling: ChaCha8Rng,
    unlabeled_sampling: ChaCha8Rng,
    labeled_aug: ChaCha8Rng,
    unlabeled_aug: ChaCha8Rng,
    views: ChaCha8Rng,
}

impl Rngs {
    fn new(seed: u64) -> Self {
        Rngs {
            labeled_sampling: stream_rng(seed, Stream::LabeledSampling),
            unlabeled_sampling: stream_rng(seed, Stream::UnlabeledSampling),
            labeled_aug: stream_rng(seed, Stream::LabeledAug),
            unlabeled_aug: stream_rng(seed, Stream::UnlabeledAug),
            views: stream_rng(seed, Stream::Views),
        }
    }
}

fn run(cfg: &TrainConfig, world: &World, mode: Mode) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labeled: Vec<usize> = indices_of(world, Split::Labeled);
    let unlabeled: Vec<usize> = indices_of(world, Split::Unlabeled);
    if labeled.is_empty() {
        return Err(Error::Data("training needs at least one labeled scene".into()));
    }
    if mode == Mode::Pseco && unlabeled.is_empty() {
        return Err(Error::Data("semi-supervised training needs unlabeled scenes".into()));
    }

    let eval_world = if cfg.steps > 0 { Some(world.eval_world(cfg.eval_scenes)?) } else { None };
    let mut rngs = Rngs::new(cfg.seed);
    let mut student = DetectorParams::init(world.model.dim, world.data.n_categories);
    let mut teacher = student.clone();
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut shared_proposal_checks = 0;

    for step in 0..cfg.steps {
        let mut sup_grad = DetectorParams::zeros(student.dim, student.n_categories);
        let (mut cls_sup, mut reg_sup) = (0.0, 0.0);
        let lab_scale = 1.0 / cfg.labeled_batch as f64;
        for _ in 0..cfg.labeled_batch {
            let idx = labeled[rngs.labeled_sampling.random_range(0..labeled.len())];
            let (c, r) = labeled_loss(cfg, world, idx, &student, &mut rngs.labeled_aug, &mut sup_grad, lab_scale)?;
            cls_sup += c;
            reg_sup += r;
        }

        let mut report = LossReport::new(cls_sup, reg_sup, 0.0, 0.0, 0.0, cfg.beta);
        let mut fp_rate = None;
        let mut sigma_pearson = None;
        let mut grad = sup_grad;

        if mode == Mode::Pseco && step >= cfg.burn_in_steps {
            let mut unsup_grad = DetectorParams::zeros(student.dim, student.n_categories);
            let n_unl = cfg.unlabeled_ratio * cfg.labeled_batch;
            let mut acc = UnsupAccum::default();
            for _ in 0..n_unl {
                let idx = unlabeled[rngs.unlabeled_sampling.random_range(0..unlabeled.len())];
                let out = unlabeled_loss(cfg, world, idx, &teacher, &student, &mut rngs, &mut unsup_grad, 1.0 / n_unl as f64)?;
                shared_proposal_checks += 1;
                acc.add(out);
            }
            report = LossReport::new(cls_sup, reg_sup, acc.cls, acc.reg, acc.feat, cfg.beta);
            fp_rate = Some(acc.quality.false_positive_rate).filter(|_| acc.quality.positives > 0);
            sigma_pearson = pearson(&acc.sigmas, &acc.true_ious).ok();
            if cfg.beta > 0.0 {
                grad.add_scaled(cfg.beta, &unsup_grad);
            }
        }

        if cfg.weight_decay > 0.0 {
            grad.add_weight_decay(&student, cfg.weight_decay);
        }
        student = sgd_step(&student, &grad, cfg.lr_at(step))?;
        teacher = if step + 1 == cfg.burn_in_steps {
            student.clone()
        } else {
            ema_update(&teacher, &student, cfg.ema_momentum)?
        };

        let is_eval = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        let map = match (&eval_world, is_eval) {
            (Some(ew), true) => Some(evaluate(&teacher, ew, cfg.nms_iou)?.map),
            _ => None,
        };
        metrics.push(StepRecord { step, loss: report, map, fp_rate, sigma_pearson });
    }

    let final_ap = match &eval_world {
        Some(ew) => Some(evaluate(&teacher, ew, cfg.nms_iou)?),
        None => None,
    };
    Ok(TrainOutcome { student, teacher, metrics, final_ap, shared_proposal_checks })
}

fn indices_of(world: &World, split: Split) -> Vec<usize> {
    world.data.scenes.iter().enumerate().filter(|(_, s)| s.split == split).map(|(i, _)| i).collect()
}

fn strong_aug(mut f: Vec<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma > 0.0 {
        for x in f.iter_mut() {
            *x += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    f
}

/// Per-view training inputs: student-visible boxes and features, labels, and
/// the (view-space) gt boxes with their categories and regression weights.
struct ViewBatch<'a> {
    boxes: &'a [BBox],
    features: &'a [Vec<f64>],
    labels: &'a [Label],
    gt_boxes: &'a [BBox],
    gt_categories: &'a [usize],
    sigmas: &'a [Option<f64>],
    regress: bool,
}

/// Focal + weighted-L1 loss of one view; accumulates `scale * gradient` into `grad`.
/// Returns the scaled `(cls, reg)` losses.
fn view_loss(
    cfg: &TrainConfig,
    params: &DetectorParams,
    batch: &ViewBatch<'_>,
    grad: &mut DetectorParams,
    scale: f64,
) -> Result<(f64, f64)> {
    let n_pos = batch.labels.iter().filter(|l| matches!(l, Label::Positive(_))).count();
    let cls_norm = scale / n_pos.max(1) as f64;

    let mut cls = 0.0;
    let mut pos_idx = Vec::with_capacity(n_pos);
    let mut preds = Vec::with_capacity(n_pos);
    let mut targets = Vec::with_capacity(n_pos);
    let mut groups = Vec::with_capacity(n_pos);
    for (i, (f, label)) in batch.features.iter().zip(batch.labels).enumerate() {
        let logits = params.logits(f);
        let target_cat = label.gt().map(|g| batch.gt_categories[g]);
        let mut dlogits = vec![0.0; logits.len()];
        for (k, &z) in logits.iter().enumerate() {
            let out = focal_from_logit(z, target_cat == Some(k), &cfg.focal);
            cls += out.loss * cls_norm;
            dlogits[k] = out.dloss_dlogit * cls_norm;
        }
        grad.accumulate(f, &dlogits, &[0.0; 4]);
        if let (true, Some(g)) = (batch.regress, label.gt()) {
            pos_idx.push(i);
            preds.push(params.deltas(f));
            targets.push(regression_target(&batch.boxes[i], &batch.gt_boxes[g]));
            groups.push(g);
        }
    }
    let mut reg = 0.0;
    if !pos_idx.is_empty() {
        let r = weighted_l1_reg(&preds, &targets, batch.sigmas, &groups)?;
        reg = r.value * scale;
        for (&i, g) in pos_idx.iter().zip(&r.grads) {
            let g = g.map(|v| v * scale);
            grad.accumulate(&batch.features[i], &[], &g);
        }
    }
    Ok((cls, reg))
}

fn labeled_loss(
    cfg: &TrainConfig,
    world: &World,
    idx: usize,
    student: &DetectorParams,
    aug_rng: &mut ChaCha8Rng,
    grad: &mut DetectorParams,
    scale: f64,
) -> Result<(f64, f64)> {
    let scene = &world.data.scenes[idx];
    let boxes = world.boxes(idx);
    let features: Vec<Vec<f64>> = world.proposals[idx]
        .iter()
        .map(|p| strong_aug(p.feature.clone(), cfg.strong_aug_sigma, aug_rng))
        .collect();
    let gt_boxes = scene.gt_boxes();
    let gt_categories: Vec<usize> = scene.objects.iter().map(|o| o.category_id).collect();
    let assignment = iou_assign(&boxes, &gt_boxes, cfg.pos_threshold)?;
    let sigmas = vec![Some(1.0); gt_boxes.len()];
    let batch = ViewBatch {
        boxes: &boxes,
        features: &features,
        labels: assignment.labels(),
        gt_boxes: &gt_boxes,
        gt_categories: &gt_categories,
        sigmas: &sigmas,
        regress: true,
    };
    view_loss(cfg, student, &batch, grad, scale)
}

#[derive(Default)]
struct UnsupAccum {
    cls: f64,
    reg: f64,
    feat: f64,
    quality: AssignmentQuality,
    sigmas: Vec<f64>,
    true_ious: Vec<f64>,
}

struct UnsupOut {
    cls: f64,
    reg: f64,
    feat: f64,
    quality: AssignmentQuality,
    sigmas: Vec<f64>,
    true_ious: Vec<f64>,
}

impl UnsupAccum {
    fn add(&mut self, o: UnsupOut) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.feat += o.feat;
        self.quality = self.quality.merge(&o.quality);
        self.sigmas.extend(o.sigmas);
        self.true_ious.extend(o.true_ious);
    }
}

/// Pseudo labels for one unlabeled scene from the teacher's view of its
/// proposals, with the shared-proposal assignment and consistency votes.
pub struct PseudoLabelResult {
    pub pseudo: Vec<PseudoLabel>,
    pub assignment: AssignmentResult,
    /// Teacher predictions mapped back to native scene coordinates.
    pub teacher_preds: Vec<Prediction>,
    /// Checksum of the proposal boxes the teacher consumed.
    pub proposal_checksum: u64,
}

pub(crate) fn checksum(boxes: &[BBox]) -> u64 {
    boxes.iter().flat_map(|b| b.to_array()).fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Maps a box from a `(scale, hflip)` view back to native coordinates.
fn to_native(b: &BBox, scale: f64, hflip: bool, native_width: f64) -> Result<BBox> {
    let unflipped = transform_box(b, 1.0, hflip, native_width * scale)?;
    transform_box(&unflipped, 1.0 / scale, false, native_width)
}

/// Runs the teacher on a weakly augmented view (`scale`, `hflip`) of the scene
/// and turns its output into assigned, consistency-weighted pseudo labels.
pub fn teacher_pseudo_labels(
    cfg: &TrainConfig,
    world: &World,
    idx: usize,
    teacher: &DetectorParams,
    scale: f64,
    hflip: bool,
) -> Result<PseudoLabelResult> {
    let scene = &world.data.scenes[idx];
    let props = &world.proposals[idx];
    let native: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    let view_w = scene.width * scale;
    let mut view_boxes = Vec::with_capacity(props.len());
    let mut view_feats = Vec::with_capacity(props.len());
    for p in props {
        let vb = transform_box(&p.bbox, scale, hflip, view_w)?;
        view_feats.push(world.model.view_feature(p, &vb, hflip));
        view_boxes.push(vb);
    }
    let view_preds = super::detector::detector_forward(teacher, &view_boxes, &view_feats)?;
    let teacher_preds = view_preds
        .into_iter()
        .map(|p| {
            Ok(Prediction {
                regressed_box: to_native(&p.regressed_box, scale, hflip, scene.width)?,
                category_probs: p.category_probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pseudo = pseudo_from_predictions(cfg, &teacher_preds)?;
    let opts = PlaOptions { t: cfg.t_bag, alpha: cfg.alpha, dynamic_k: cfg.dynamic_k };
    let assignment = pla_assign(&native, &teacher_preds, &pseudo, &opts)?;
    let pseudo = attach_sigma(&pseudo, &assignment, &teacher_preds)?;
    Ok(PseudoLabelResult { pseudo, assignment, teacher_preds, proposal_checksum: checksum(&native) })
}

pub fn pseudo_from_predictions(cfg: &TrainConfig, preds: &[Prediction]) -> Result<Vec<PseudoLabel>> {
    let dets: Vec<Detection> = preds
        .iter()
        .flat_map(|p| {
            p.category_probs
                .iter()
                .enumerate()
                .filter(|(_, &s)| s >= cfg.tau)
                .map(move |(k, &s)| Detection { bbox: p.regressed_box, category_id: k, score: s })
        })
        .collect();
    generate_pseudo_labels(&dets, cfg.tau, cfg.nms_iou)
}

#[allow(clippy::too_many_arguments)]
fn unlabeled_loss(
    cfg: &TrainConfig,
    world: &World,
    idx: usize,
    teacher: &DetectorParams,
    student: &DetectorParams,
    rngs: &mut Rngs,
    grad: &mut DetectorParams,
    scale: f64,
) -> Result<UnsupOut> {
    let scene = &world.data.scenes[idx];
    let (lo, hi) = cfg.resize_range;

    // Weak view for the teacher.
    let r0 = sample_resize_ratio(&mut rngs.views, lo, hi)?;
    let flip0 = rngs.views.random::<f64>() < cfg.hflip_prob;
    let pl = teacher_pseudo_labels(cfg, world, idx, teacher, r0, flip0)?;

    // Student views V1 / V2 over the same proposals.
    let r1 = sample_resize_ratio(&mut rngs.views, lo, hi)?;
    let flip1 = rngs.views.random::<f64>() < cfg.hflip_prob;
    let spec = ViewSpec { resize_ratio: r1, downsample_factor: cfg.downsample_factor, hflip: flip1 };
    let props = &world.proposals[idx];
    let native: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
    if checksum(&native) != pl.proposal_checksum {
        return Err(Error::invalid("teacher and student proposals diverged"));
    }
    let pviews = make_views((scene.width, scene.height), &native, &spec)?;
    let gviews = make_views((scene.width, scene.height), &pl.pseudo.iter().map(|p| p.bbox).collect::<Vec<_>>(), &spec)?;

    // Pseudo boxes lost to degeneracy turn their positives into negatives.
    let mut gt_remap = vec![None; pl.pseudo.len()];
    for (new, &old) in gviews.kept.iter().enumerate() {
        gt_remap[old] = Some(new);
    }
    let labels: Vec<Label> = pviews
        .kept
        .iter()
        .map(|&i| match pl.assignment.labels()[i] {
            Label::Positive(g) => gt_remap[g].map_or(Label::Negative, Label::Positive),
            other => other,
        })
        .collect();
    let gt_categories: Vec<usize> = gviews.kept.iter().map(|&j| pl.pseudo[j].category_id).collect();
    let sigmas: Vec<Option<f64>> = gviews.kept.iter().map(|&j| pl.pseudo[j].sigma).collect();
    let regress = cfg.unsup_reg == UnsupReg::Pcv;

    let mut views = vec![(&pviews.v1, &gviews.v1)];
    if cfg.multi_view {
        views.push((&pviews.v2, &gviews.v2));
    }
    let view_scale = scale / views.len() as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    let mut view_feats: Vec<Vec<Vec<f64>>> = Vec::with_capacity(views.len());
    for (pv, gv) in &views {
        let feats: Vec<Vec<f64>> = pviews
            .kept
            .iter()
            .zip(&pv.boxes)
            .map(|(&i, vb)| strong_aug(world.model.view_feature(&props[i], vb, flip1), cfg.strong_aug_sigma, &mut rngs.unlabeled_aug))
            .collect();
        let batch = ViewBatch {
            boxes: &pv.boxes,
            features: &feats,
            labels: &labels,
            gt_boxes: &gv.boxes,
            gt_categories: &gt_categories,
            sigmas: &sigmas,
            regress,
        };
        let (c, r) = view_loss(cfg, student, &batch, grad, view_scale)?;
        cls += c;
        reg += r;
        view_feats.push(feats);
    }

    let mut feat = 0.0;
    if cfg.multi_view && cfg.feat_consistency_weight > 0.0 {
        feat = scale_consistency(cfg, world, student, &pviews.v1.boxes, &pviews.v2.boxes, &view_feats[0], &view_feats[1], grad, scale)?;
    }

    let truth = scene.gt_pairs();
    let categories: Vec<usize> = pl.pseudo.iter().map(|p| p.category_id).collect();
    let quality = assignment_quality(&pl.assignment, &native, &categories, &truth)?;
    let ious = best_true_ious(&pl.pseudo, &truth);
    let (sigmas_d, true_ious): (Vec<f64>, Vec<f64>) =
        pl.pseudo.iter().zip(ious).filter_map(|(p, t)| p.sigma.map(|s| (s, t))).unzip();

    Ok(UnsupOut { cls, reg, feat, quality, sigmas: sigmas_d, true_ious })
}

/// Agreement of student outputs between a proposal in `V1` at level `l + 1`
/// and the same proposal in `V2` at level `l`. Proposals whose routing hits a
/// clamp are left out.
#[allow(clippy::too_many_arguments)]
fn scale_consistency(
    cfg: &TrainConfig,
    world: &World,
    student: &DetectorParams,
    v1_boxes: &[BBox],
    v2_boxes: &[BBox],
    f1: &[Vec<f64>],
    f2: &[Vec<f64>],
    grad: &mut DetectorParams,
    scale: f64,
) -> Result<f64> {
    let lc = &world.model.level_cfg;
    let n_out = student.n_categories + 4;
    let outputs = |f: &[f64]| -> Vec<f64> {
        let mut o = student.logits(f);
        o.extend(student.deltas(f));
        o
    };
    // level in V2 -> proposal indices
    let mut by_level: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for (i, (b1, b2)) in v1_boxes.iter().zip(v2_boxes).enumerate() {
        let (l1, l2) = (raw_fpn_level(b1, lc), raw_fpn_level(b2, lc));
        let unclamped = |l: i32| l >= lc.level_min && l <= lc.level_max;
        if l1 == l2 + 1 && unclamped(l1) && unclamped(l2) {
            by_level.entry(l2).or_default().push(i);
        }
    }
    if by_level.is_empty() {
        return Ok(0.0);
    }
    let mut pairs = Vec::with_capacity(by_level.len());
    for (&l2, idxs) in &by_level {
        let mut a = Grid::zeros(idxs.len(), 1, n_out);
        let mut b = Grid::zeros(idxs.len(), 1, n_out);
        for (row, &i) in idxs.iter().enumerate() {
            a.data[row * n_out..(row + 1) * n_out].copy_from_slice(&outputs(&f1[i]));
            b.data[row * n_out..(row + 1) * n_out].copy_from_slice(&outputs(&f2[i]));
        }
        pairs.push(AlignedPair { level_v1: (l2 + 1) as u8, level_v2: l2 as u8, v1: a, v2: b });
    }
    let loss = feature_consistency_loss(&pairs);
    let w = cfg.feat_consistency_weight * scale;
    let n_pairs = pairs.len() as f64;
    for (pair, idxs) in pairs.iter().zip(by_level.values()) {
        let denom = (idxs.len() * n_out) as f64 * n_pairs;
        for (row, &i) in idxs.iter().enumerate() {
            let diff: Vec<f64> = (0..n_out)
                .map(|o| 2.0 * (pair.v1.data[row * n_out + o] - pair.v2.data[row * n_out + o]) / denom * w)
                .collect();
            let k = student.n_categories;
            let dd = [diff[k], diff[k + 1], diff[k + 2], diff[k + 3]];
            grad.accumulate(&f1[i], &diff[..k], &dd);
            let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
            let nd = [neg[k], neg[k + 1], neg[k + 2], neg[k + 3]];
            grad.accumulate(&f2[i], &neg[..k], &nd);
        }
    }
    Ok(loss * w)
}
