//! Dense f64 tensors, a named parameter arena, and reverse-mode autodiff.

mod fdcheck;
pub mod ops;
mod tape;
mod tensor;

pub use fdcheck::{finite_diff_check, GradCheckReport, DENOM_FLOOR};
pub use ops::{argmax, cross_entropy, kl_div, mse, softmax_rows, temperature_softmax};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, Tensor, TensorStore};
