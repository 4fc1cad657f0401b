//! Dense tensors with reverse-mode automatic differentiation.

mod conv;
mod ops;
mod params;
mod real;
mod tape;
mod tensor;

pub use ops::{concat_last_axis, Axis, DISTANCE_FLOOR};
pub use params::{Group, ParamStore, Parameter};
pub use real::{gemm, Real};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
