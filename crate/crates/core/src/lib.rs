//! Detector-agnostic building blocks for a coarse-to-fine detection cascade
//! aimed at large images with small, clustered objects.
//!
//! An early stage looks at a cheap downsampled view of the image and predicts
//! one box per grid cell together with a confidence, a binary "group" flag
//! (does this box cover several objects?) and a pair of rescaling offsets.
//! A transition step turns those predictions into early-exit detections and
//! a bounded set of crops; later stages re-detect inside the zoomed crops.
//! The final output is the union of all early exits and last-stage boxes
//! after a last non-maximum suppression pass.
//!
//! Module map:
//! - [`boxgeom`]: normalized box algebra, grids, cell-relative encoding.
//! - [`grouping`]: ground-truth assignment, group targets, offset targets.
//! - [`losses`]: per-cell predictions, loss terms and analytic gradients.
//! - [`transition`]: discard / early-exit / refine rules, NMS, crop extraction.
//! - [`pipeline`]: multi-stage orchestration, cost accounting.
//! - [`evalmetrics`]: average precision, occupancy, threshold sweeps.
//! - [`synthdata`]: synthetic scenes, image format, oracle detectors.
//! - [`training`]: a toy trainable predictor and the two-stage loop.

pub mod boxgeom;
pub mod error;
pub mod evalmetrics;
pub mod grouping;
pub mod losses;
pub mod pipeline;
pub mod synthdata;
pub mod training;
pub mod transition;

pub use error::{Error, Result};
