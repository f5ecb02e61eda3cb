//! Desk-scale workbench for scale-variant object detection.
//!
//! The crate splits a wide target scale range into sub-ranges, binds each
//! sub-range to a backbone stage whose stride suits it, trains one detector
//! head per sub-range on a shared convolutional backbone, and merges the
//! per-range predictions at inference time. Synthetic glyph scenes stand in
//! for a real dataset so the whole pipeline runs on a laptop CPU.
//!
//! Module map:
//!
//! - [`geometry`] — stride, receptive field, projected ROI extent, and
//!   cell-collision analysis for candidate network structures.
//! - [`partition`] — scale-range split schemes and their stage assignments.
//! - [`synthdata`] — deterministic synthetic scene generator with ground
//!   truth boxes, plus augmentation and resizing.
//! - [`sampler`] — anchor construction, ground-truth routing, ROI role
//!   labeling, negative-pool balancing, and batch sampling.
//! - [`model`] — tensors, layers with analytic gradients, the shared
//!   backbone, per-range heads, losses, SGD, training drivers, the stride
//!   sweep, and filter-count compression.
//! - [`detector`] — single-scale inference: proposals, NMS, per-range
//!   classification, and cross-detector aggregation.
//! - [`evaluator`] — IoU matching, PR/AP with difficulty buckets,
//!   recall-at-FP curves, and the box-to-ellipse regressor.
//! - [`cli`] — configuration loading and the subcommand implementations.

pub mod cli;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod model;
pub mod partition;
pub mod sampler;
pub mod synthdata;

pub use error::{Error, Result};
