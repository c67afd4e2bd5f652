//! Self-organizing prototypes (SOP) for non-parametric self-supervised
//! representation learning, at desk scale.
//!
//! The crate is generic over the real type through [`numerics::Scalar`];
//! training uses `f32` and gradient checks use `f64`. Concrete aliases for
//! both live at the crate root.

pub mod data;
pub mod evalkit;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod seed;
pub mod trainer;

pub use numerics::{Matrix, Scalar, Tape};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type MemoryBank32 = memory::MemoryBank<f32>;
pub type Encoder32 = model::EncoderState<f32>;
pub type Encoder64 = model::EncoderState<f64>;
