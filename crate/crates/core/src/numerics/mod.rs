//! Dense kernels, the gradient tape and gradient checking.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{layer_norm, matmul, softmax_rows, Matrix};
pub use optim::Adam;
pub use params::{Graph, Param, ParamGrads, ParamGroup, ParamId, ParameterSet};
pub use tape::{Gradients, Tape, Var};
