//! Tape-based reverse-mode automatic differentiation over `f32` tensors.

mod conv;
mod gradcheck;
mod ops;
mod optim;
mod params;
mod spatial;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, GradCheck};
pub use ops::concat;
pub use optim::{Adam, GradAccumulator};
pub use params::{BoundParams, ParamSet, CHECKPOINT_SCHEMA};
pub use spatial::Boundary;
pub(crate) use spatial::{trilinear_sample, warp_forward};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
