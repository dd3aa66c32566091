//! Oriented-box toolkit for building detection.
//!
//! - [`geometry`]: oriented boxes, convex clipping, rotated IoU, minimum-area rectangles.
//! - [`nms`]: greedy rotated non-maximum suppression and relation-key filtering.
//! - [`relation`]: spatial relation graph between RoIs and stacked feature aggregation.
//! - [`sgcm`]: toy-scale pyramid fusion, pseudo-masks and segmentation loss.
//! - [`cascade`]: two-stage score fusion and final post-processing.
//! - [`eval`]: VOC2012-style rotated average precision.
//! - [`data`]: polygon ingestion, splits, statistics and JSONL records.
//! - [`tensor_io`]: weight files and matrix dumps.
//! - [`synth`]: seeded synthetic scenes for end-to-end checks.

pub mod cascade;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nms;
pub mod relation;
pub mod sgcm;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};
pub use geometry::{Obb, Point};
pub use nms::ScoredDetection;
