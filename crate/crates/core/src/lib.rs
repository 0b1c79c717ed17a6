//! Transformer encoder classifier that shrinks inputs in width (learned token
//! pruning) and depth (entropy-gated early exits), trained in four stages and
//! measured with an exact multiply-accumulate ledger.
//!
//! The core is generic over the scalar type; `f64` aliases are provided for
//! the common case.

pub mod corpus;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod exiting;
pub mod numerics;
pub mod pipeline;
pub mod pruning;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Model64 = encoder::Model<f64>;
pub type Model32 = encoder::Model<f32>;
pub type PruningState64 = pruning::PruningState<f64>;
pub type Inference64 = engine::Inference<f64>;
pub type ExitPolicy64 = engine::ExitPolicy<f64>;
