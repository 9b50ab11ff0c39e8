//! Dense f64 tensors, define-by-run reverse-mode differentiation, and Adam.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tensor;
mod trace;


pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Gradients, ParamStore};
pub use tensor::Tensor;
pub use trace::{mixture_log_density, Activation, Mask, Trace, Var};
