//! Boxes, pyramid coordinate transforms, fovea regions and scale assignment.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

/// Axis-aligned box in continuous image-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Ordered, finite coordinates.
    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    /// `max(h/w, w/h)`; infinite for a box with one zero side.
    pub fn aspect_ratio(&self) -> f64 {
        let (w, h) = (self.width(), self.height());
        (h / w).max(w / h)
    }

    /// Mirror across the vertical axis of an image of width `image_w`.
    pub fn hflip(&self, image_w: f64) -> Self {
        Self::new(image_w - self.x2, self.y1, image_w - self.x1, self.y2)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }
}

/// Ground-truth box with a dense category id in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub category: usize,
}

impl LabeledBox {
    pub const fn new(bbox: BBox, category: usize) -> Self {
        Self { bbox, category }
    }
}

/// One pyramid level: stride `2^l` and basic scale `4 * stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub level: u32,
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PyramidLevel {
    pub fn new(level: u32, image_w: usize, image_h: usize) -> Self {
        let stride = 1usize << level;
        Self {
            level,
            stride,
            grid_h: image_h.div_ceil(stride),
            grid_w: image_w.div_ceil(stride),
        }
    }

    #[inline]
    pub fn stride_f(&self) -> f64 {
        self.stride as f64
    }

    /// The characteristic object size handled by this level.
    #[inline]
    pub fn basic_scale(&self) -> f64 {
        4.0 * self.stride as f64
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Image-plane position of the center of cell `(x, y)`.
    #[inline]
    pub fn cell_center(&self, x: usize, y: usize) -> (f64, f64) {
        let s = self.stride_f();
        (s * (x as f64 + 0.5), s * (y as f64 + 0.5))
    }
}

/// Contiguous set of pyramid levels for a fixed input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub levels: Vec<PyramidLevel>,
    pub image_w: usize,
    pub image_h: usize,
}

impl PyramidSpec {
    /// Levels `min_level..=max_level` over an `image_w x image_h` input.
    pub fn new(image_w: usize, image_h: usize, min_level: u32, max_level: u32) -> Result<Self> {
        if min_level > max_level || max_level > 16 {
            return Err(Error::Config(format!(
                "bad level range {min_level}..={max_level}"
            )));
        }
        if image_w == 0 || image_h == 0 {
            return Err(Error::Config("empty image".into()));
        }
        let levels = (min_level..=max_level)
            .map(|l| PyramidLevel::new(l, image_w, image_h))
            .collect();
        Ok(Self {
            levels,
            image_w,
            image_h,
        })
    }

    /// A pyramid made of a single explicit level.
    pub fn single(level: PyramidLevel, image_w: usize, image_h: usize) -> Self {
        Self {
            levels: alloc::vec![level],
            image_w,
            image_h,
        }
    }

    pub fn largest_stride(&self) -> usize {
        self.levels.last().map_or(1, |l| l.stride)
    }

    pub fn total_cells(&self) -> usize {
        self.levels.iter().map(PyramidLevel::num_cells).sum()
    }
}

/// A box projected onto a feature plane, with its center and size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// The shrunk positive area of a projected box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoveaRegion {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl FoveaRegion {
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }
}

/// Target-assignment knobs: fovea shrink factor and scale-range factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    pub sigma: f64,
    pub eta: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            sigma: 0.4,
            eta: 2.0,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::Config(format!(
                "sigma must be in (0, 1], got {}",
                self.sigma
            )));
        }
        if !(self.eta >= 1.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be >= 1, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn project_box(b: &BBox, level: &PyramidLevel) -> ProjectedBox {
    let s = level.stride_f();
    let (x1, y1, x2, y2) = (b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s);
    ProjectedBox {
        x1,
        y1,
        x2,
        y2,
        cx: 0.5 * (x2 + x1),
        cy: 0.5 * (y2 + y1),
        w: x2 - x1,
        h: y2 - y1,
    }
}

pub fn fovea_region(p: &ProjectedBox, sigma: f64) -> FoveaRegion {
    let hw = 0.5 * sigma * p.w;
    let hh = 0.5 * sigma * p.h;
    FoveaRegion {
        x1: p.cx - hw,
        y1: p.cy - hh,
        x2: p.cx + hw,
        y2: p.cy + hh,
    }
}

/// Geometric-mean side length, `sqrt(w * h)`, in image pixels.
pub fn object_scale(b: &BBox) -> f64 {
    math::sqrt(b.width().max(0.0) * b.height().max(0.0))
}

/// Whether `scale` lies in the closed range `[r / eta, r * eta]` of `level`.
#[inline]
pub fn scale_in_range(scale: f64, level: &PyramidLevel, eta: f64) -> bool {
    let r = level.basic_scale();
    r / eta <= scale && scale <= r * eta
}

/// Level numbers (`l`, not positions) whose scale range admits the box.
pub fn assigned_levels(b: &BBox, pyramid: &PyramidSpec, eta: f64) -> Vec<u32> {
    let scale = object_scale(b);
    pyramid
        .levels
        .iter()
        .filter(|lvl| scale_in_range(scale, lvl, eta))
        .map(|lvl| lvl.level)
        .collect()
}
