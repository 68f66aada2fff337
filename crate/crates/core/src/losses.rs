//! Training objectives: sigmoid focal classification loss, consistency-weighted
//! L1 box regression, and the supervised / semi-supervised totals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha_t: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha_t: 0.25, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalOutput {
    pub loss: f64,
    /// Derivative with respect to the logit that produced `p`.
    pub dloss_dlogit: f64,
    /// `p` was outside `[PROB_EPS, 1 - PROB_EPS]` and got clamped.
    pub clamped: bool,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary focal loss of probability `p` against label `y`.
///
/// `alpha_t` weights positives, `1 - alpha_t` weights negatives.
pub fn focal_loss(p: f64, y: bool, params: &FocalParams) -> FocalOutput {
    let clamped = !(PROB_EPS..=1.0 - PROB_EPS).contains(&p);
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let FocalParams { alpha_t: a, gamma: g } = *params;
    let (loss, grad) = if y {
        let q = 1.0 - p;
        let mod_ = q.powf(g);
        (-a * mod_ * p.ln(), a * mod_ * (g * p * p.ln() - q))
    } else {
        let q = 1.0 - p;
        let mod_ = p.powf(g);
        (-(1.0 - a) * mod_ * q.ln(), (1.0 - a) * mod_ * (p - g * q * q.ln()))
    };
    FocalOutput { loss, dloss_dlogit: grad, clamped }
}

#[inline]
pub fn focal_from_logit(logit: f64, y: bool, params: &FocalParams) -> FocalOutput {
    focal_loss(sigmoid(logit), y, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegLoss {
    pub value: f64,
    /// Subgradient of `value` with respect to each prediction coordinate.
    pub grads: Vec<[f64; 4]>,
}

/// Consistency-weighted L1 regression loss.
///
/// `groups[i]` is the gt index of positive `i`; `sigmas[g]` its weight. With
/// `M` the number of gts that own positives and `N_g` the positives of gt `g`:
/// `(1/M) * sum_g sigma_g / N_g * sum_{i in g} |pred_i - target_i|_1`.
pub fn weighted_l1_reg(
    preds: &[[f64; 4]],
    targets: &[[f64; 4]],
    sigmas: &[Option<f64>],
    groups: &[usize],
) -> Result<RegLoss> {
    if preds.len() != targets.len() || preds.len() != groups.len() {
        return Err(Error::invalid(format!(
            "regression inputs disagree: {} preds, {} targets, {} groups",
            preds.len(),
            targets.len(),
            groups.len()
        )));
    }
    let mut counts = vec![0usize; sigmas.len()];
    for (i, &g) in groups.iter().enumerate() {
        match sigmas.get(g) {
            Some(Some(_)) => counts[g] += 1,
            Some(None) => {
                return Err(Error::invalid(format!("positive {i} references gt {g} without a consistency weight")))
            }
            None => return Err(Error::invalid(format!("positive {i} references missing gt {g}"))),
        }
    }
    let m = counts.iter().filter(|&&c| c > 0).count();
    if m == 0 {
        return Ok(RegLoss { value: 0.0, grads: Vec::new() });
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for ((p, t), &g) in preds.iter().zip(targets).zip(groups) {
        let w = sigmas[g].unwrap_or(0.0) / (m as f64 * counts[g] as f64);
        let mut gr = [0.0; 4];
        for c in 0..4 {
            let r = p[c] - t[c];
            value += w * r.abs();
            gr[c] = if r > 0.0 { w } else if r < 0.0 { -w } else { 0.0 };
        }
        grads.push(gr);
    }
    Ok(RegLoss { value, grads })
}

pub fn supervised_loss(cls: f64, reg: f64) -> f64 {
    cls + reg
}

/// `sup + beta * unsup`.
pub fn total_loss(sup: f64, unsup: f64, beta: f64) -> f64 {
    debug_assert!(beta >= 0.0);
    sup + beta * unsup
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub cls_sup: f64,
    pub reg_sup: f64,
    pub cls_unsup: f64,
    pub reg_unsup: f64,
    pub feat_consistency: f64,
    pub total: f64,
    pub beta: f64,
}

impl LossReport {
    pub fn new(cls_sup: f64, reg_sup: f64, cls_unsup: f64, reg_unsup: f64, feat_consistency: f64, beta: f64) -> Self {
        let total = total_loss(
            supervised_loss(cls_sup, reg_sup),
            cls_unsup + reg_unsup + feat_consistency,
            beta,
        );
        LossReport { cls_sup, reg_sup, cls_unsup, reg_unsup, feat_consistency, total, beta }
    }

    pub fn is_consistent(&self) -> bool {
        let expect = (self.cls_sup + self.reg_sup) + self.beta * (self.cls_unsup + self.reg_unsup + self.feat_consistency);
        (expect - self.total).abs() <= 1e-12 * expect.abs().max(1.0)
    }
}
