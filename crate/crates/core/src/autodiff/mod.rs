//! Dense tensors and a recording tape for reverse-mode differentiation.
//!
//! Every primitive checks its output for NaN/Inf and fails instead of
//! propagating non-finite values. Reductions run sequentially in row-major
//! order, so replaying the same tape on the same inputs is bit-reproducible.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::{Real, Tensor};

/// A tensor with a stable parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Real> NamedTensor<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        NamedTensor { name: name.into(), tensor }
    }
}
