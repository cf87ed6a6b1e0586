//! Cell detection with morphological attribute prediction, trainable from
//! sparsely annotated images (one fully labeled rectangle per image).
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line tool.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod annotation;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod report;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision detector used for training and inference.
pub type Detector32 = detector::Detector<f32>;
/// Double-precision detector used for gradient checks.
pub type Detector64 = detector::Detector<f64>;
pub type Detection32 = detector::Detection<f32>;
pub type LevelPrediction32 = detector::LevelPrediction<f32>;
