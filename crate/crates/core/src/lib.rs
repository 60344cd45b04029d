//! Click-supervised semantic segmentation with teacher-student consistency,
//! dense-CRF regularization and cross-student pseudo-labels.
//!
//! The pipeline trains an *ancillary* student/teacher pair from click labels,
//! then trains one or more freshly seeded *primary* pairs that additionally
//! learn from per-pixel pseudo-labels produced by the previous stage's student.

pub mod ablation;
pub mod config;
pub mod data;
pub mod ema;
pub mod error;
pub mod eval;
pub(crate) mod linalg;
pub mod losses;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Array3, ScoreMap};
