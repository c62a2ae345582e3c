//! Minimal CPU runtime for training decoded architectures.
//!
//! Tensors are `(batch, rows, cols, channels)`; convolutions go through
//! im2col and a blocked GEMM. Everything is generic over [`Scalar`] so the
//! same code runs in `f32` for training and `f64` for gradient checks.

mod gradcheck;
mod init;
mod network;
pub mod ops;
mod optim;
mod snapshot;
mod tensor;

use thiserror::Error;

pub use gradcheck::{coverage_graph, grad_check, relative_error, GradCheckReport};
pub use init::{he_init, he_std};
pub use network::{BuildOptions, Mode, Network, Param};
pub use optim::{Optimizer, OptimizerKind};
pub use snapshot::{load_weights, save_weights, SNAPSHOT_VERSION};
pub use tensor::{Scalar, Tensor4};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training diverged (non-finite loss)")]
    TrainingDiverged,
    #[error("weight snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
