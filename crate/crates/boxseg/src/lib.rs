//! Box-supervised instance segmentation with teacher-student pseudo labeling.
//!
//! The crate trains a small instance-segmentation network from bounding-box
//! annotations alone. A teacher model (an exponential moving average of the
//! student) predicts instance masks, which are matched to ground-truth boxes,
//! quality-scored, and fed back to the student as noise-aware pseudo-mask
//! supervision on top of the usual box-derived losses. A naive two-stage
//! self-training pipeline and a fully-supervised oracle are included as
//! baselines, together with a synthetic shapes benchmark and a mask evaluator.
//!
//! All numeric code is generic over the scalar type (`f32` for training
//! speed, `f64` for verification); concrete aliases live at the crate root.

pub mod assignment;
pub mod config;
pub mod data;
pub mod engine;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod model;
pub mod report;
pub mod scalar;
pub mod scoring;

pub use scalar::Scalar;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0} is {1}x{2}, expected {3}x{4}")]
    ShapeMismatch(&'static str, usize, usize, usize, usize),
    #[error("box ({0}, {1}, {2}, {3}) outside image bounds {4}x{5}")]
    BoxOutOfBounds(f64, f64, f64, f64, usize, usize),
    #[error("invalid box coordinates ({0}, {1}, {2}, {3})")]
    InvalidBox(f64, f64, f64, f64),
    #[error("length mismatch: {0} has {1} entries, expected {2}")]
    LengthMismatch(&'static str, usize, usize),
    #[error("zero output size in transform")]
    EmptyTransform,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("parse error in {file}: {detail}")]
    Parse { file: String, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training fault at iteration {0}: non-finite loss")]
    NonFiniteLoss(u64),
    #[error("non-finite model output in {0}")]
    NonFiniteOutput(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Concrete aliases for the common instantiations.
pub type BBox32 = geometry::BBox<f32>;
pub type BBox64 = geometry::BBox<f64>;
pub type ProbMask32 = geometry::ProbMask<f32>;
pub type ProbMask64 = geometry::ProbMask<f64>;
pub type Image32 = grid::Chw<f32>;
pub type Image64 = grid::Chw<f64>;
pub type Model32 = model::SegModel<f32>;
pub type Model64 = model::SegModel<f64>;
pub type TrainState32 = engine::TrainState<f32>;
pub type TrainState64 = engine::TrainState<f64>;
