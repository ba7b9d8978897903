//! Relative-difficulty distillation laboratory for semantic segmentation.
//!
//! The crate trains a small convolutional teacher on procedurally generated
//! multi-class scenes, then distills it into a smaller student. The task loss
//! of the student is reweighted per pixel by a relative-difficulty map that
//! switches form over the course of training: an early stage derived from the
//! disagreement between the teacher's two classifier heads, and a later stage
//! derived from thresholded teacher/student confidence maps combined by a
//! bitwise operation.
//!
//! Everything runs on a built-in reverse-mode autodiff core in `f64`; no GPU
//! or external ML framework is involved. See the `examples/` directory for
//! one runnable entry point per capability, and the `rdseg` binary for the
//! batch-oriented command line.

pub mod data;
pub mod distill;
pub mod grid;
pub mod harness;
pub mod imgio;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use distill::{CombineMode, DifficultyMap, DistillConfig, LossBreakdown, MapKind, Stage};
pub use grid::{LabelGrid, PixelGrid};
pub use model::{LogitPair, ModelSpec, Params, StageSpec};
pub use tensor::{DiffTensor, Tape, TensorError, ValueId};
