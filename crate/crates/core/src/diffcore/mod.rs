//! Minimal reverse-mode differentiation over dense real and complex tensors.

mod complex;
mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod tape;
mod tensor;

pub use complex::{fft_values, CVar};
pub use gradcheck::{grad_check, grad_check_report, GradCheckOptions, GradCheckReport};
pub use kernels::FFT_CONV_THRESHOLD;
pub use tape::{BackwardCtx, Gradients, Tape, Var};
pub use tensor::{ComplexTensor, RealTensor};
