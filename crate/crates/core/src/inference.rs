//! Post-processing from raw head outputs to final detections.
//!
//! Per level: sigmoid scores, threshold, top-k over all (cell, class) pairs,
//! decode the survivors. Then pool the levels, run greedy NMS per class and
//! keep the global top scores.
//!
//! Score ties are broken by (level, row-major cell, class) order.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::codec::{decode, BoxOffsets};
use crate::detector::LevelOutput;
use crate::geometry::{iou, BBox, PyramidSpec};
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceParams {
    pub score_thresh: f64,
    pub per_level_topk: usize,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            per_level_topk: 1000,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl InferenceParams {
    pub fn validate(&self, num_levels: usize) -> Result<()> {
        if !(self.score_thresh > 0.0 && self.score_thresh < 1.0) {
            return Err(Error::Config(format!(
                "score_thresh {} outside (0, 1)",
                self.score_thresh
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config(format!(
                "nms_iou {} outside (0, 1]",
                self.nms_iou
            )));
        }
        if self.per_level_topk == 0 || self.max_detections == 0 {
            return Err(Error::Config(
                "per_level_topk and max_detections must be positive".into(),
            ));
        }
        if self.max_detections > self.per_level_topk * num_levels.max(1) {
            return Err(Error::Config(format!(
                "max_detections {} exceeds per_level_topk x {num_levels} levels",
                self.max_detections
            )));
        }
        Ok(())
    }
}

/// Descending score, then ascending index.
fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending score order. A box is discarded when its
/// IoU with an already kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(by_score(scores));
    let mut suppressed = alloc::vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

fn check_outputs(outputs: &[LevelOutput], pyramid: &PyramidSpec) -> Result<()> {
    if outputs.len() != pyramid.levels.len() {
        return Err(Error::Shape(format!(
            "{} output levels for a {}-level pyramid",
            outputs.len(),
            pyramid.levels.len()
        )));
    }
    for (out, lvl) in outputs.iter().zip(&pyramid.levels) {
        let cells = lvl.num_cells();
        if out.level != lvl.level
            || out.height != lvl.grid_h
            || out.width != lvl.grid_w
            || out.cls_logits.len() != out.num_classes * cells
            || out.box_offsets.len() != 4 * cells
        {
            return Err(Error::Shape(format!(
                "level {} output does not match the pyramid grid {}x{}",
                out.level, lvl.grid_h, lvl.grid_w
            )));
        }
    }
    Ok(())
}

/// Full post-processing of one image's head outputs.
pub fn postprocess(
    outputs: &[LevelOutput],
    pyramid: &PyramidSpec,
    params: &InferenceParams,
) -> Result<Vec<Detection>> {
    check_outputs(outputs, pyramid)?;
    let (iw, ih) = (pyramid.image_w as f64, pyramid.image_h as f64);
    let mut pool: Vec<Detection> = Vec::new();
    for (out, lvl) in outputs.iter().zip(&pyramid.levels) {
        let cells = out.cells();
        // (score, cell, class), enumerated in row-major cell then class order
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for cell in 0..cells {
            for c in 0..out.num_classes {
                let s = math::sigmoid(out.cls_logits[c * cells + cell]);
                if s >= params.score_thresh {
                    cand.push((s, cell, c));
                }
            }
        }
        // stable sort keeps enumeration order among equal scores
        cand.sort_by(|a, b| b.0.total_cmp(&a.0));
        cand.truncate(params.per_level_topk);
        for (score, cell, category) in cand {
            let (x, y) = (cell % out.width, cell / out.width);
            let t = BoxOffsets::new(
                out.box_offsets[cell],
                out.box_offsets[cells + cell],
                out.box_offsets[2 * cells + cell],
                out.box_offsets[3 * cells + cell],
            );
            pool.push(Detection {
                bbox: decode(x, y, &t, lvl, iw, ih),
                category,
                score,
            });
        }
    }

    let num_classes = outputs.iter().map(|o| o.num_classes).max().unwrap_or(0);
    let mut kept: Vec<usize> = Vec::new();
    for c in 0..num_classes {
        let idx: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].category == c).collect();
        let boxes: Vec<BBox> = idx.iter().map(|&i| pool[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| pool[i].score).collect();
        kept.extend(
            nms(&boxes, &scores, params.nms_iou)
                .into_iter()
                .map(|k| idx[k]),
        );
    }
    let scores: Vec<f64> = pool.iter().map(|d| d.score).collect();
    kept.sort_by(by_score(&scores));
    kept.truncate(params.max_detections);
    Ok(kept.into_iter().map(|i| pool[i]).collect())
}

/// Class-agnostic proposals with default thresholds, at most `k` of them.
pub fn propose(outputs: &[LevelOutput], pyramid: &PyramidSpec, k: usize) -> Result<Vec<Detection>> {
    propose_with(outputs, pyramid, &InferenceParams::default(), k)
}

/// Class-agnostic proposals; `params.max_detections` is replaced by `k`.
pub fn propose_with(
    outputs: &[LevelOutput],
    pyramid: &PyramidSpec,
    params: &InferenceParams,
    k: usize,
) -> Result<Vec<Detection>> {
    if let Some(out) = outputs.iter().find(|o| o.num_classes != 1) {
        return Err(Error::Config(format!(
            "proposals need a class-agnostic head, level {} has {} classes",
            out.level, out.num_classes
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let params = InferenceParams {
        max_detections: k,
        ..*params
    };
    postprocess(outputs, pyramid, &params)
}
