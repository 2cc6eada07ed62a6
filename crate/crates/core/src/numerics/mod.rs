//! Dense matrices, named parameters and a reverse-mode tape.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{cross_entropy, log_softmax_rows, log_sum_exp, softmax_rows, Matrix};
pub(crate) use matrix::log_add;
pub use params::{xavier_uniform, ParamId, ParamStore, ParamTensor};
pub use tape::{Gradients, Tape, Var};
