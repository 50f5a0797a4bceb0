//! Dense `f64` tensors, a reverse-mode tape, named parameters and Adam.

mod adam;
mod gemm;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub(crate) use gemm::gemm;
pub use gradcheck::{
    check_gradient, grad_check, grad_check_params, relative_error, roundoff_bound, GradCheckReport, ZERO_GRADIENT,
};
pub use params::{Param, ParamStore};
pub use tape::{Gradients, NodeId, Op, Tape};
pub use tensor::Tensor;
