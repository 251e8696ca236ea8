//! Dense tensors, seeded randomness and reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod params;
mod real;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_with_floor, GradCheckReport};
pub use params::{Gradients, Init, ParamId, ParamRegistry, ParamSpec, ParameterSet};
pub use real::{lit, Precision, Real};
pub use rng::{Rng, RngState};
pub use tape::{sigmoid, tanh, token_nll, Tape, Var};
pub use tensor::Tensor;
