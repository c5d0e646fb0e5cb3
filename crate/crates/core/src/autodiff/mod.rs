//! Reverse-mode differentiation over the tensor primitives, and the
//! central-difference oracle the gradient tests are checked against.

mod check;
mod tape;

pub use check::{
    compare, finite_diff, grad_check, relative_error, GradCheckReport, GradCheckTarget,
    GroupReport, ParamMap, FD_STEP,
};
pub use tape::{GradientMap, Gradients, OpKind, OpaqueFn, Tape, Var};
