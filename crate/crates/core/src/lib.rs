//! Anchor-free dense object detection in the FoveaBox style.
//!
//! The crate is `no_std` (with `alloc`) and covers the whole numerical
//! pipeline: pyramid geometry and scale assignment, fovea target maps, the
//! log-space box codec, focal and smooth-L1 losses with analytic gradients, a
//! small dense tensor core with hand-written backward passes, the detector
//! itself, inference post-processing and COCO-style evaluation.
//!
//! File formats, dataset generation, training orchestration and the command
//! line live in the companion `fovea` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod assignment;
pub mod codec;
pub mod detector;
mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod loss;
mod math;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{AssignConfig, BBox, LabeledBox, PyramidLevel, PyramidSpec};
