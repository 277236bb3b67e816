//! Log-space box offsets relative to a cell center and the level's basic scale.
//!
//! A positive cell `(x, y)` on a level with stride `s` and basic scale `r`
//! regresses the distances from its image-plane center `s * (x + 0.5)` to the
//! four box edges, normalized by `r` and taken in log space.

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, PyramidLevel};
use crate::math;

/// Lower clamp on edge distances before taking the log.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxOffsets {
    pub tx1: f64,
    pub ty1: f64,
    pub tx2: f64,
    pub ty2: f64,
}

impl BoxOffsets {
    pub const fn new(tx1: f64, ty1: f64, tx2: f64, ty2: f64) -> Self {
        Self { tx1, ty1, tx2, ty2 }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx1, self.ty1, self.tx2, self.ty2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode(x: usize, y: usize, gt: &BBox, level: &PyramidLevel, eps: f64) -> BoxOffsets {
    let (cx, cy) = level.cell_center(x, y);
    let r = level.basic_scale();
    let t = |d: f64| math::ln(d.max(eps) / r);
    BoxOffsets {
        tx1: t(cx - gt.x1),
        ty1: t(cy - gt.y1),
        tx2: t(gt.x2 - cx),
        ty2: t(gt.y2 - cy),
    }
}

/// Inverse of [`encode`], clipped to the image and reordered into a valid box.
pub fn decode(
    x: usize,
    y: usize,
    t: &BoxOffsets,
    level: &PyramidLevel,
    image_w: f64,
    image_h: f64,
) -> BBox {
    let (cx, cy) = level.cell_center(x, y);
    let r = level.basic_scale();
    let x1 = (cx - r * math::exp(t.tx1)).clamp(0.0, image_w);
    let y1 = (cy - r * math::exp(t.ty1)).clamp(0.0, image_h);
    let x2 = (cx + r * math::exp(t.tx2)).clamp(0.0, image_w);
    let y2 = (cy + r * math::exp(t.ty2)).clamp(0.0, image_h);
    BBox::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
}

/// Unclipped decode, for callers that need the raw inverse.
pub fn decode_unclipped(x: usize, y: usize, t: &BoxOffsets, level: &PyramidLevel) -> BBox {
    let (cx, cy) = level.cell_center(x, y);
    let r = level.basic_scale();
    BBox::new(
        cx - r * math::exp(t.tx1),
        cy - r * math::exp(t.ty1),
        cx + r * math::exp(t.tx2),
        cy + r * math::exp(t.ty2),
    )
}
