//! COCO-protocol average precision and recall, plus aspect-ratio and
//! per-class analysis slices.
//!
//! Matching follows the COCO reference evaluator: per image and class,
//! detections are visited by descending score (at most `max_dets` of them) and
//! take the still-unmatched gt with the highest IoU at or above the threshold.
//! Ignored gts are only taken when no regular gt qualifies, and among equal
//! IoUs the later gt in (regular, then ignored) order wins. Detections matched
//! to ignored gts, and unmatched detections outside the slice being scored,
//! are dropped from the precision/recall curve.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, LabeledBox};
use crate::inference::Detection;
use crate::{Error, Result};

/// Per-image detection cap used for AP.
pub const MAX_DETS: usize = 100;
/// Detection caps reported as AR in [`EvalResult::ar_by_k`].
pub const AR_MAX_DETS: [usize; 3] = [1, 10, 100];
/// Proposal counts for class-agnostic recall.
pub const PROPOSAL_KS: [usize; 3] = [100, 300, 1000];
/// Area boundaries between small, medium and large objects.
pub const AREA_SMALL: f64 = 32.0 * 32.0;
pub const AREA_MEDIUM: f64 = 96.0 * 96.0;

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageGts {
    pub image_id: u64,
    pub gts: Vec<LabeledBox>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageDets {
    pub image_id: u64,
    pub dets: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean over classes and IoU thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// AP averaged over thresholds, for classes with at least one gt.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Recall averaged over classes and thresholds with at most `k` detections per image.
    pub ar_by_k: BTreeMap<usize, f64>,
}

/// AP restricted to gts whose aspect ratio `u = max(h/w, w/h)` falls in a bucket.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AspectBucketReport {
    pub ap_all: f64,
    /// `u < 3`
    pub ap_u_lt3: Option<f64>,
    /// `3 <= u <= 5`
    pub ap_u_3to5: Option<f64>,
    /// `u > 5`
    pub ap_u_gt5: Option<f64>,
}

/// Which gts count for a slice; the rest are ignored.
#[derive(Debug, Clone, Copy)]
enum Slice {
    All,
    Area(f64, f64),
    /// Aspect-ratio bucket by index: `u < 3`, `3 <= u <= 5`, `u > 5`.
    Aspect(u8),
}

impl Slice {
    fn admits(&self, b: &BBox) -> bool {
        match *self {
            Slice::All => true,
            Slice::Area(lo, hi) => {
                let a = b.area();
                a >= lo && a <= hi
            }
            Slice::Aspect(bucket) => {
                let u = b.aspect_ratio();
                match bucket {
                    0 => u < 3.0,
                    1 => (3.0..=5.0).contains(&u),
                    _ => u > 5.0,
                }
            }
        }
    }
}

fn aspect_slices() -> [Slice; 3] {
    [Slice::Aspect(0), Slice::Aspect(1), Slice::Aspect(2)]
}

/// One detection's outcome at one IoU threshold.
#[derive(Debug, Clone, Copy)]
struct Outcome {
    score: f64,
    tp: bool,
    ignored: bool,
}

/// Per (image, class) detections and gts, ready for matching.
struct Cell {
    /// Scores, sorted descending, capped.
    scores: Vec<f64>,
    det_boxes: Vec<BBox>,
    gt_boxes: Vec<BBox>,
    /// `ious[d * gts + g]`
    ious: Vec<f64>,
}

impl Cell {
    fn new(mut dets: Vec<(f64, BBox)>, gt_boxes: Vec<BBox>, cap: usize) -> Self {
        // stable: equal scores keep input order
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        dets.truncate(cap);
        let mut ious = Vec::with_capacity(dets.len() * gt_boxes.len());
        for (_, d) in &dets {
            for g in &gt_boxes {
                ious.push(iou(d, g));
            }
        }
        Self {
            scores: dets.iter().map(|d| d.0).collect(),
            det_boxes: dets.into_iter().map(|d| d.1).collect(),
            gt_boxes,
            ious,
        }
    }

    /// Greedy matching at `thr`; returns outcomes in score order and the
    /// number of non-ignored gts.
    fn evaluate(&self, thr: f64, slice: Slice) -> (Vec<Outcome>, usize) {
        let ng = self.gt_boxes.len();
        let gt_ign: Vec<bool> = self.gt_boxes.iter().map(|b| !slice.admits(b)).collect();
        let order: Vec<usize> = (0..ng)
            .filter(|&g| !gt_ign[g])
            .chain((0..ng).filter(|&g| gt_ign[g]))
            .collect();
        let mut taken = alloc::vec![false; ng];
        let mut out = Vec::with_capacity(self.scores.len());
        for d in 0..self.scores.len() {
            let mut best: Option<usize> = None;
            let mut best_iou = thr.min(1.0 - 1e-10);
            for &g in &order {
                if taken[g] {
                    continue;
                }
                if let Some(b) = best {
                    if !gt_ign[b] && gt_ign[g] {
                        break;
                    }
                }
                let v = self.ious[d * ng + g];
                if v < best_iou {
                    continue;
                }
                best_iou = v;
                best = Some(g);
            }
            let outcome = match best {
                Some(g) => {
                    taken[g] = true;
                    Outcome {
                        score: self.scores[d],
                        tp: true,
                        ignored: gt_ign[g],
                    }
                }
                None => Outcome {
                    score: self.scores[d],
                    tp: false,
                    ignored: !slice.admits(&self.det_boxes[d]),
                },
            };
            out.push(outcome);
        }
        (out, gt_ign.iter().filter(|i| !**i).count())
    }
}

/// AP from outcomes pooled over images, 101-point interpolated.
///
/// `None` when there are no gts to recall.
fn average_precision(mut pooled: Vec<Outcome>, num_gts: usize) -> (Option<f64>, Option<f64>) {
    if num_gts == 0 {
        return (None, None);
    }
    pooled.retain(|o| !o.ignored);
    pooled.sort_by(|a, b| b.score.total_cmp(&a.score));
    let n = pooled.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for o in &pooled {
        if o.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gts as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..n).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < target);
        if idx < n {
            sum += precision[idx];
        }
    }
    (
        Some(sum / 101.0),
        Some(recall.last().copied().unwrap_or(0.0)),
    )
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a u64>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(*id) {
            return Err(Error::Duplicate(*id));
        }
    }
    Ok(())
}

/// Detections and gts bucketed by (image position, class).
struct Prepared {
    /// `cells[img][class]`
    cells: Vec<Vec<Cell>>,
    num_classes: usize,
}

fn prepare(
    dets: &[ImageDets],
    gts: &[ImageGts],
    num_classes: usize,
    cap: usize,
    class_agnostic: bool,
) -> Result<Prepared> {
    check_unique(gts.iter().map(|g| &g.image_id))?;
    check_unique(dets.iter().map(|d| &d.image_id))?;
    let pos: BTreeMap<u64, usize> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| (g.image_id, i))
        .collect();
    let mut per_image: Vec<&[Detection]> = alloc::vec![&[]; gts.len()];
    for d in dets {
        let i = *pos.get(&d.image_id).ok_or_else(|| {
            Error::Config(format!("detections for unknown image id {}", d.image_id))
        })?;
        per_image[i] = &d.dets;
    }
    let classes = if class_agnostic { 1 } else { num_classes };
    let class_of = |c: usize| if class_agnostic { 0 } else { c };
    let mut cells = Vec::with_capacity(gts.len());
    for (img, ds) in gts.iter().zip(per_image) {
        for g in &img.gts {
            if !class_agnostic && g.category >= num_classes {
                return Err(Error::Config(format!(
                    "gt category {} in image {} outside {num_classes} classes",
                    g.category, img.image_id
                )));
            }
        }
        for d in ds {
            if !class_agnostic && d.category >= num_classes {
                return Err(Error::Config(format!(
                    "detection category {} in image {} outside {num_classes} classes",
                    d.category, img.image_id
                )));
            }
        }
        let row = (0..classes)
            .map(|c| {
                let dd = ds
                    .iter()
                    .filter(|d| class_of(d.category) == c)
                    .map(|d| (d.score, d.bbox))
                    .collect();
                let gg = img
                    .gts
                    .iter()
                    .filter(|g| class_of(g.category) == c)
                    .map(|g| g.bbox)
                    .collect();
                Cell::new(dd, gg, cap)
            })
            .collect();
        cells.push(row);
    }
    Ok(Prepared {
        cells,
        num_classes: classes,
    })
}

impl Prepared {
    /// (AP, final recall) for one class, threshold, slice and per-image cap.
    fn class_metrics(
        &self,
        class: usize,
        thr: f64,
        slice: Slice,
        cap: usize,
    ) -> (Option<f64>, Option<f64>) {
        let mut pooled = Vec::new();
        let mut num_gts = 0;
        for row in &self.cells {
            let (mut outcomes, n) = row[class].evaluate(thr, slice);
            outcomes.truncate(cap);
            pooled.extend(outcomes);
            num_gts += n;
        }
        average_precision(pooled, num_gts)
    }

    /// Mean AP over classes and thresholds with defined values.
    fn mean_ap(&self, thresholds: &[f64], slice: Slice) -> Option<f64> {
        let mut vals = Vec::new();
        for &t in thresholds {
            for c in 0..self.num_classes {
                if let (Some(ap), _) = self.class_metrics(c, t, slice, MAX_DETS) {
                    vals.push(ap);
                }
            }
        }
        mean(&vals)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// COCO-style evaluation over the given IoU thresholds.
///
/// `ap50` and `ap75` are always measured at 0.5 and 0.75. Images are the ones
/// listed in `gts`; detections for any other image id are an error.
pub fn evaluate(
    dets: &[ImageDets],
    gts: &[ImageGts],
    num_classes: usize,
    iou_thresholds: &[f64],
) -> Result<EvalResult> {
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::Config(format!("IoU thresholds {iou_thresholds:?}")));
    }
    let p = prepare(dets, gts, num_classes, MAX_DETS, false)?;
    let mut per_class_ap = BTreeMap::new();
    for c in 0..num_classes {
        let vals: Vec<f64> = iou_thresholds
            .iter()
            .filter_map(|&t| p.class_metrics(c, t, Slice::All, MAX_DETS).0)
            .collect();
        if let Some(m) = mean(&vals) {
            per_class_ap.insert(c, m);
        }
    }
    let mut ar_by_k = BTreeMap::new();
    for &k in &AR_MAX_DETS {
        let mut vals = Vec::new();
        for &t in iou_thresholds {
            for c in 0..num_classes {
                if let (_, Some(r)) = p.class_metrics(c, t, Slice::All, k) {
                    vals.push(r);
                }
            }
        }
        ar_by_k.insert(k, mean(&vals).unwrap_or(0.0));
    }
    Ok(EvalResult {
        ap: p.mean_ap(iou_thresholds, Slice::All).unwrap_or(0.0),
        ap50: p.mean_ap(&[0.5], Slice::All).unwrap_or(0.0),
        ap75: p.mean_ap(&[0.75], Slice::All).unwrap_or(0.0),
        ap_small: p.mean_ap(iou_thresholds, Slice::Area(0.0, AREA_SMALL)),
        ap_medium: p.mean_ap(iou_thresholds, Slice::Area(AREA_SMALL, AREA_MEDIUM)),
        ap_large: p.mean_ap(iou_thresholds, Slice::Area(AREA_MEDIUM, f64::INFINITY)),
        per_class_ap,
        ar_by_k,
    })
}

/// Class-agnostic average recall of the top `k` proposals per image, averaged
/// over IoU thresholds 0.50:0.05:0.95, for each `k` in `ks`.
pub fn average_recall(
    proposals: &[ImageDets],
    gts: &[ImageGts],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let cap = ks.iter().copied().max().unwrap_or(0);
    let p = prepare(proposals, gts, 1, cap, true)?;
    let thresholds = coco_iou_thresholds();
    let mut out = BTreeMap::new();
    for &k in ks {
        let vals: Vec<f64> = thresholds
            .iter()
            .map(|&t| p.class_metrics(0, t, Slice::All, k).1.unwrap_or(0.0))
            .collect();
        out.insert(k, mean(&vals).unwrap_or(0.0));
    }
    Ok(out)
}

/// AP over all gts and within each aspect-ratio bucket.
pub fn aspect_report(
    dets: &[ImageDets],
    gts: &[ImageGts],
    num_classes: usize,
) -> Result<AspectBucketReport> {
    for img in gts {
        for (i, g) in img.gts.iter().enumerate() {
            if !(g.bbox.is_valid() && g.bbox.width() > 0.0 && g.bbox.height() > 0.0) {
                return Err(Error::InvalidBox {
                    index: i,
                    reason: format!("degenerate gt in image {}", img.image_id),
                });
            }
        }
    }
    let p = prepare(dets, gts, num_classes, MAX_DETS, false)?;
    let t = coco_iou_thresholds();
    let [lt3, mid, gt5] = aspect_slices();
    Ok(AspectBucketReport {
        ap_all: p.mean_ap(&t, Slice::All).unwrap_or(0.0),
        ap_u_lt3: p.mean_ap(&t, lt3),
        ap_u_3to5: p.mean_ap(&t, mid),
        ap_u_gt5: p.mean_ap(&t, gt5),
    })
}

/// `AP_a - AP_b` per class, sorted by descending delta then class id.
pub fn per_class_delta(a: &EvalResult, b: &EvalResult) -> Result<Vec<(usize, f64)>> {
    if !a.per_class_ap.keys().eq(b.per_class_ap.keys()) {
        return Err(Error::ClassMismatch);
    }
    let mut out: Vec<(usize, f64)> = a
        .per_class_ap
        .iter()
        .zip(b.per_class_ap.values())
        .map(|((c, x), y)| (*c, x - y))
        .collect();
    out.sort_by(|p, q| q.1.total_cmp(&p.1).then(p.0.cmp(&q.0)));
    Ok(out)
}
