//! Ground-truth boxes to per-level training targets.
//!
//! On every level whose scale range admits an object, the cells whose centers
//! fall inside the object's fovea region become positives for its category
//! and carry log-space offset targets. Every other cell is negative. A cell
//! claimed by several objects goes to the one with the smallest image-plane
//! area (lower object index on equal areas). An object admitted by a level
//! whose fovea region misses every cell center is snapped to the single
//! nearest cell so that it still trains.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::{self, BoxOffsets};
use crate::geometry::{
    fovea_region, object_scale, project_box, scale_in_range, AssignConfig, BBox, FoveaRegion,
    LabeledBox, PyramidLevel, PyramidSpec,
};
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CellLabel {
    #[default]
    Negative,
    Ignore,
    Positive {
        category: usize,
        object: usize,
    },
}

impl CellLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, CellLabel::Positive { .. })
    }
}

/// Training targets for one pyramid level. Maps are row-major `grid_h x grid_w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMaps {
    pub level: PyramidLevel,
    pub cls: Vec<CellLabel>,
    /// Offset targets per cell; zero wherever `cls` is not positive.
    pub boxes: Vec<BoxOffsets>,
    pub pos_count: usize,
}

impl TargetMaps {
    pub fn empty(level: PyramidLevel) -> Self {
        let n = level.num_cells();
        Self {
            level,
            cls: vec![CellLabel::Negative; n],
            boxes: vec![BoxOffsets::default(); n],
            pos_count: 0,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.level.grid_w + x
    }

    pub fn label(&self, x: usize, y: usize) -> CellLabel {
        self.cls[self.index(x, y)]
    }

    pub fn positive_mask(&self) -> Vec<bool> {
        self.cls.iter().map(CellLabel::is_positive).collect()
    }

    /// Iterator over `(x, y, category, object)` of positive cells, row-major.
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let w = self.level.grid_w;
        self.cls
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| match *c {
                CellLabel::Positive { category, object } => Some((i % w, i / w, category, object)),
                _ => None,
            })
    }
}

/// Cell-center membership test, closed on all sides.
#[inline]
pub fn cell_is_positive(x: usize, y: usize, region: &FoveaRegion) -> bool {
    region.contains_point(x as f64 + 0.5, y as f64 + 0.5)
}

/// Cell whose center is nearest the projected center of `gt` on `level`.
///
/// Ties go to the smaller x, then the smaller y. The result is clamped to
/// the grid.
pub fn snap_fallback(gt: &BBox, level: &PyramidLevel) -> (usize, usize) {
    let p = project_box(gt, level);
    let nearest = |c: f64, n: usize| -> usize {
        // argmin over integers of |i + 0.5 - c|, rounding half down
        let i = math::ceil(c - 1.0);
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(n.saturating_sub(1))
        }
    };
    (nearest(p.cx, level.grid_w), nearest(p.cy, level.grid_h))
}

/// Inclusive index range of cells whose centers may fall in `[lo, hi]`.
fn candidate_range(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    if n == 0 || hi < 0.0 || lo > n as f64 {
        return None;
    }
    // widened by one on each side; the exact test is `cell_is_positive`
    let start = math::ceil(lo - 1.5).max(0.0) as usize;
    let end = (math::ceil(hi) as usize).min(n - 1);
    (start <= end).then_some((start, end))
}

fn validate_gts(gts: &[LabeledBox], num_classes: usize) -> Result<()> {
    for (index, g) in gts.iter().enumerate() {
        let b = &g.bbox;
        if !b.is_valid() {
            return Err(Error::InvalidBox {
                index,
                reason: format!("malformed box {b:?}"),
            });
        }
        if b.width() <= 0.0 || b.height() <= 0.0 {
            return Err(Error::InvalidBox {
                index,
                reason: format!("non-positive width or height in {b:?}"),
            });
        }
        if g.category >= num_classes {
            return Err(Error::InvalidBox {
                index,
                reason: format!("category {} outside [0, {num_classes})", g.category),
            });
        }
    }
    Ok(())
}

/// Targets for a single level.
pub fn build_level_targets(
    gts: &[LabeledBox],
    level: &PyramidLevel,
    cfg: &AssignConfig,
) -> TargetMaps {
    let mut maps = TargetMaps::empty(*level);
    let (gw, gh) = (level.grid_w, level.grid_h);
    // (area, object index) of the current owner of each cell
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; gw * gh];

    let mut claim = |x: usize, y: usize, area: f64, obj: usize| {
        let slot = &mut owner[y * gw + x];
        let wins = match *slot {
            None => true,
            Some((a, j)) => area < a || (area == a && obj < j),
        };
        if wins {
            *slot = Some((area, obj));
        }
    };

    for (obj, g) in gts.iter().enumerate() {
        if !scale_in_range(object_scale(&g.bbox), level, cfg.eta) {
            continue;
        }
        let area = g.bbox.area();
        let region = fovea_region(&project_box(&g.bbox, level), cfg.sigma);
        let mut any = false;
        if let (Some((x0, x1)), Some((y0, y1))) = (
            candidate_range(region.x1, region.x2, gw),
            candidate_range(region.y1, region.y2, gh),
        ) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if cell_is_positive(x, y, &region) {
                        claim(x, y, area, obj);
                        any = true;
                    }
                }
            }
        }
        if !any {
            let (x, y) = snap_fallback(&g.bbox, level);
            claim(x, y, area, obj);
        }
    }

    for (i, slot) in owner.iter().enumerate() {
        if let Some((_, obj)) = *slot {
            let g = &gts[obj];
            let (x, y) = (i % gw, i / gw);
            maps.cls[i] = CellLabel::Positive {
                category: g.category,
                object: obj,
            };
            maps.boxes[i] = codec::encode(x, y, &g.bbox, level, codec::DEFAULT_EPS);
            maps.pos_count += 1;
        }
    }
    maps
}

/// Targets for every level of `pyramid`, in level order.
pub fn build_targets(
    gts: &[LabeledBox],
    pyramid: &PyramidSpec,
    cfg: &AssignConfig,
    num_classes: usize,
) -> Result<Vec<TargetMaps>> {
    cfg.validate()?;
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be at least 1".into()));
    }
    validate_gts(gts, num_classes)?;
    Ok(pyramid
        .levels
        .iter()
        .map(|level| build_level_targets(gts, level, cfg))
        .collect())
}

pub fn total_positives(maps: &[TargetMaps]) -> usize {
    maps.iter().map(|m| m.pos_count).sum()
}
