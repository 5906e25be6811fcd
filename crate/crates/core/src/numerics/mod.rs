//! Dense tensors, reverse-mode differentiation and a finite-difference
//! gradient checker.

mod gradcheck;
mod seed;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use seed::derive_seed;
pub use tape::{Bindings, ParamStore, Tape, Var};
pub use tensor::Tensor;
