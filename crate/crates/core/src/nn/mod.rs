//! Minimal differentiable tensor machinery: dense `f64` tensors, an eager
//! reverse-mode tape, seeded initialization, SGD with momentum, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod init;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Gradients, ParamId, ParamSet};
pub use tape::{conv_out_extent, PoolMethod, Tape, Var};
pub use tensor::Tensor;
