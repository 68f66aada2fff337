//! Linear two-task detector head over proposal features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_deltas, encode_deltas, BBox};
use crate::losses::sigmoid;

/// The regression head predicts box deltas divided by these, so that its
/// targets are of order one.
pub const DELTA_STDS: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Normalized regression target taking `from` onto `to`.
pub fn regression_target(from: &BBox, to: &BBox) -> [f64; 4] {
    let d = encode_deltas(from, to);
    [0, 1, 2, 3].map(|c| d[c] / DELTA_STDS[c])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Independent sigmoid probability per category.
    pub category_probs: Vec<f64>,
    pub regressed_box: BBox,
}

/// Classification weights `K x D` (row-major) with bias, regression weights
/// `4 x D` with bias. Also used to hold gradients of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub dim: usize,
    pub n_categories: usize,
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_reg: Vec<f64>,
    pub b_reg: Vec<f64>,
}

/// Initial foreground probability encoded in the classification bias.
pub const PRIOR_PROB: f64 = 0.01;

impl DetectorParams {
    pub fn zeros(dim: usize, n_categories: usize) -> Self {
        DetectorParams {
            dim,
            n_categories,
            w_cls: vec![0.0; n_categories * dim],
            b_cls: vec![0.0; n_categories],
            w_reg: vec![0.0; 4 * dim],
            b_reg: vec![0.0; 4],
        }
    }

    /// Zero weights with the classification bias set to the foreground prior.
    pub fn init(dim: usize, n_categories: usize) -> Self {
        let mut p = Self::zeros(dim, n_categories);
        let bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        p.b_cls.iter_mut().for_each(|b| *b = bias);
        p
    }

    pub fn same_shape(&self, other: &DetectorParams) -> bool {
        self.dim == other.dim
            && self.n_categories == other.n_categories
            && self.w_cls.len() == other.w_cls.len()
            && self.b_cls.len() == other.b_cls.len()
            && self.w_reg.len() == other.w_reg.len()
            && self.b_reg.len() == other.b_reg.len()
    }

    fn parts(&self) -> [&Vec<f64>; 4] {
        [&self.w_cls, &self.b_cls, &self.w_reg, &self.b_reg]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w_cls, &mut self.b_cls, &mut self.w_reg, &mut self.b_reg]
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.parts().into_iter().flat_map(|v| v.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Elementwise `self + a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &DetectorParams) {
        for (dst, src) in self.parts_mut().into_iter().zip(other.parts()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        }
    }

    /// Adds `wd * w` to the weight gradients, leaving biases alone.
    pub fn add_weight_decay(&mut self, params: &DetectorParams, wd: f64) {
        for (g, w) in self.w_cls.iter_mut().chain(self.w_reg.iter_mut()).zip(params.w_cls.iter().chain(&params.w_reg)) {
            *g += wd * w;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.n_categories)
            .map(|k| dot(&self.w_cls[k * self.dim..(k + 1) * self.dim], feature) + self.b_cls[k])
            .collect()
    }

    /// Normalized deltas; see [`DELTA_STDS`].
    pub fn deltas(&self, feature: &[f64]) -> [f64; 4] {
        let mut d = [0.0; 4];
        for (c, out) in d.iter_mut().enumerate() {
            *out = dot(&self.w_reg[c * self.dim..(c + 1) * self.dim], feature) + self.b_reg[c];
        }
        d
    }

    /// Accumulates the gradient of a per-proposal loss given its derivatives
    /// with respect to the logits and the regression outputs.
    pub fn accumulate(&mut self, feature: &[f64], dlogits: &[f64], ddeltas: &[f64; 4]) {
        let dim = self.dim;
        for (k, &g) in dlogits.iter().enumerate() {
            if g != 0.0 {
                for (w, f) in self.w_cls[k * dim..(k + 1) * dim].iter_mut().zip(feature) {
                    *w += g * f;
                }
                self.b_cls[k] += g;
            }
        }
        for (c, &g) in ddeltas.iter().enumerate() {
            if g != 0.0 {
                for (w, f) in self.w_reg[c * dim..(c + 1) * dim].iter_mut().zip(feature) {
                    *w += g * f;
                }
                self.b_reg[c] += g;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs the head on each proposal: sigmoid class probabilities and the
/// proposal box refined by the predicted deltas.
pub fn detector_forward(params: &DetectorParams, boxes: &[BBox], features: &[Vec<f64>]) -> Result<Vec<Prediction>> {
    if boxes.len() != features.len() {
        return Err(Error::invalid(format!("{} boxes but {} features", boxes.len(), features.len())));
    }
    boxes
        .iter()
        .zip(features)
        .enumerate()
        .map(|(i, (b, f))| {
            if f.len() != params.dim {
                return Err(Error::invalid(format!(
                    "proposal {i} has feature dimension {} but the head expects {}",
                    f.len(),
                    params.dim
                )));
            }
            let logits = params.logits(f);
            let d = params.deltas(f);
            if logits.iter().chain(&d).any(|v| !v.is_finite()) {
                return Err(Error::Numeric { index: i, what: "non-finite head output".into() });
            }
            let regressed_box = decode_deltas(b, &[0, 1, 2, 3].map(|c| d[c] * DELTA_STDS[c]))
                .map_err(|e| Error::Numeric { index: i, what: format!("regressed box: {e}") })?;
            Ok(Prediction { category_probs: logits.into_iter().map(sigmoid).collect(), regressed_box })
        })
        .collect()
}

/// `params - lr * grads`.
pub fn sgd_step(params: &DetectorParams, grads: &DetectorParams, lr: f64) -> Result<DetectorParams> {
    if !params.same_shape(grads) {
        return Err(Error::invalid("gradient shape does not match parameters"));
    }
    if let Some(i) = grads.values().position(|v| !v.is_finite()) {
        return Err(Error::Numeric { index: i, what: "non-finite gradient".into() });
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    let mut out = params.clone();
    out.add_scaled(-lr, grads);
    Ok(out)
}

/// `m * teacher + (1 - m) * student`.
pub fn ema_update(teacher: &DetectorParams, student: &DetectorParams, m: f64) -> Result<DetectorParams> {
    if !teacher.same_shape(student) {
        return Err(Error::invalid("teacher and student shapes differ"));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum must be in [0,1], got {m}")));
    }
    let mut out = teacher.clone();
    for (dst, src) in out.parts_mut().into_iter().zip(student.parts()) {
        for (t, s) in dst.iter_mut().zip(src) {
            *t = m * *t + (1.0 - m) * s;
        }
    }
    Ok(out)
}
