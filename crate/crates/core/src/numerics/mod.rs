//! Dense matrices, the handful of row-wise kernels the training graph
//! needs, and a small reverse-mode differentiation tape.

mod gradcheck;
pub(crate) mod kernel;
mod matrix;
mod ops;
mod scalar;
mod tape;

use thiserror::Error;

pub use gradcheck::{grad_check, GRAD_CHECK_STEP};
pub use matrix::Matrix;
pub use ops::{
    cross_entropy, entropy, matmul, matmul_nt, rowwise_l2_normalize, softmax_rows, softmax_temp,
    topk_rowwise, TopK, LOG_EPS, MIN_ROW_NORM,
};
#[allow(unused_imports)]
pub(crate) use ops::{
    gelu_scalar, normalize_rows_in_place, rank_order, softmax_in_place, topk_row,
};
pub use scalar::Scalar;
pub use tape::{GatherMap, Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("row {row} has norm below 1e-12")]
    ZeroRow { row: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("k={k} exceeds {cols} columns")]
    KTooLarge { k: usize, cols: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("index {index} out of range for {len} elements")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("gradient is not finite")]
    NonFiniteGradient,
}
