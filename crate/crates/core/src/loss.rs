//! Focal loss on the class maps, smooth-L1 on the box offsets.
//!
//! Both terms are sums normalized by the number of positive cells (floored
//! at one), and both return gradients with respect to the raw head outputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::assignment::{CellLabel, TargetMaps};
use crate::detector::LevelOutput;
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    pub focal: FocalParams,
    /// Smooth-L1 knee.
    pub beta: f64,
    /// Weight of the box term in the total.
    pub box_weight: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            focal: FocalParams::default(),
            beta: 0.11,
            box_weight: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let f = &self.focal;
        if !(f.alpha > 0.0 && f.alpha < 1.0) || !(f.gamma >= 0.0) {
            return Err(Error::Config(format!("bad focal parameters {f:?}")));
        }
        if !(self.beta > 0.0) || !(self.box_weight >= 0.0) {
            return Err(Error::Config(format!(
                "bad smooth-L1 beta {} or box weight {}",
                self.beta, self.box_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_loss: f64,
    pub box_loss: f64,
    pub total: f64,
    pub num_pos: usize,
}

/// Focal loss of one logit and its derivative with respect to that logit.
///
/// Evaluated in log space: `ln p = -softplus(-z)`, `ln(1-p) = -softplus(z)`.
pub fn focal_term(logit: f64, positive: bool, params: &FocalParams) -> (f64, f64) {
    let FocalParams { alpha, gamma } = *params;
    // fold the negative case onto the positive one via z -> -z
    let (z, a, sign) = if positive {
        (logit, alpha, 1.0)
    } else {
        (-logit, 1.0 - alpha, -1.0)
    };
    let log_pt = -math::softplus(-z);
    let pt = math::sigmoid(z);
    let one_minus = math::sigmoid(-z);
    let modulator = if gamma == 0.0 {
        1.0
    } else {
        math::powf(one_minus, gamma)
    };
    let loss = -a * modulator * log_pt;
    // d/dz of -a (1-p)^g ln p with p = sigmoid(z)
    let dz = a * modulator * (gamma * pt * log_pt - one_minus);
    (loss, sign * dz)
}

/// Focal loss over a `C x cells` logit map (channel-major) against cell labels.
///
/// Returns the loss divided by `normalizer` and the matching gradient.
/// `Ignore` cells contribute nothing.
pub fn focal_loss(
    logits: &[f64],
    labels: &[CellLabel],
    num_classes: usize,
    params: &FocalParams,
    normalizer: f64,
) -> Result<(f64, Vec<f64>)> {
    let cells = labels.len();
    if logits.len() != num_classes * cells {
        return Err(Error::Shape(format!(
            "focal: {} logits for {num_classes} classes x {cells} cells",
            logits.len()
        )));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("class logit at flat index {i}")));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for c in 0..num_classes {
        let row = &logits[c * cells..(c + 1) * cells];
        let grow = &mut grad[c * cells..(c + 1) * cells];
        for ((z, g), label) in row.iter().zip(grow.iter_mut()).zip(labels) {
            let positive = match *label {
                CellLabel::Ignore => continue,
                CellLabel::Negative => false,
                CellLabel::Positive { category, .. } => category == c,
            };
            let (l, d) = focal_term(*z, positive, params);
            total += l;
            *g = d / normalizer;
        }
    }
    Ok((total / normalizer, grad))
}

/// Smooth-L1 of one residual and its derivative.
#[inline]
pub fn smooth_l1_term(d: f64, beta: f64) -> (f64, f64) {
    let a = d.abs();
    if a < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (a - 0.5 * beta, d.signum())
    }
}

/// Smooth-L1 summed over paired elements, divided by `normalizer`.
pub fn smooth_l1(
    pred: &[f64],
    target: &[f64],
    beta: f64,
    normalizer: f64,
) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "smooth_l1: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("smooth_l1 input".into()));
    }
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let (l, d) = smooth_l1_term(p - t, beta);
            total += l;
            d / normalizer
        })
        .collect();
    Ok((total / normalizer, grad))
}

/// Per-level gradients of the total loss with respect to the head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrads {
    pub cls: Vec<f64>,
    pub boxes: Vec<f64>,
}

/// Unnormalized focal and smooth-L1 sums for one image, with gradients of
/// `focal + box_weight * smooth_l1` scaled by `1 / normalizer`.
pub fn total_loss_with_normalizer(
    outputs: &[LevelOutput],
    targets: &[TargetMaps],
    params: &LossParams,
    normalizer: f64,
) -> Result<(LossReport, Vec<LevelGrads>)> {
    if outputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} output levels vs {} target levels",
            outputs.len(),
            targets.len()
        )));
    }
    let mut report = LossReport::default();
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, tgt) in outputs.iter().zip(targets) {
        let cells = tgt.level.num_cells();
        if out.height != tgt.level.grid_h || out.width != tgt.level.grid_w {
            return Err(Error::Shape(format!(
                "level {}: output {}x{} vs grid {}x{}",
                tgt.level.level, out.height, out.width, tgt.level.grid_h, tgt.level.grid_w
            )));
        }
        if out.box_offsets.len() != 4 * cells {
            return Err(Error::Shape(format!(
                "level {}: {} box values for {cells} cells",
                tgt.level.level,
                out.box_offsets.len()
            )));
        }
        let (cls_loss, cls_grad) = focal_loss(
            &out.cls_logits,
            &tgt.cls,
            out.num_classes,
            &params.focal,
            normalizer,
        )?;

        let mut box_grad = vec![0.0; 4 * cells];
        let mut box_loss = 0.0;
        for (i, label) in tgt.cls.iter().enumerate() {
            if !label.is_positive() {
                continue;
            }
            let t = tgt.boxes[i].to_array();
            for (k, tk) in t.iter().enumerate() {
                let p = out.box_offsets[k * cells + i];
                if !p.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "box offset at level {} cell {i} channel {k}",
                        tgt.level.level
                    )));
                }
                let (l, d) = smooth_l1_term(p - tk, params.beta);
                box_loss += l;
                box_grad[k * cells + i] = params.box_weight * d / normalizer;
            }
        }
        report.cls_loss += cls_loss;
        report.box_loss += box_loss / normalizer;
        report.num_pos += tgt.pos_count;
        grads.push(LevelGrads {
            cls: cls_grad,
            boxes: box_grad,
        });
    }
    report.total = report.cls_loss + params.box_weight * report.box_loss;
    Ok((report, grads))
}

/// Total loss of one image, normalized by its own positive count.
pub fn total_loss(
    outputs: &[LevelOutput],
    targets: &[TargetMaps],
    params: &LossParams,
) -> Result<(LossReport, Vec<LevelGrads>)> {
    let num_pos: usize = targets.iter().map(|t| t.pos_count).sum();
    total_loss_with_normalizer(outputs, targets, params, num_pos.max(1) as f64)
}
