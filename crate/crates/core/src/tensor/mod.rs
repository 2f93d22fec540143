//! Dense matrices, LU solves and the reverse-mode tape.

mod lu;
mod matrix;
mod tape;

pub use lu::{determinant, solve, Lu, PIVOT_TOLERANCE};
pub use matrix::Matrix;
pub use tape::{layer_norm_rows, log_softmax_rows, normalize_rows, softmax_rows, Gradients, OpKind, Tape, Var};

pub(crate) use tape::skew_from_upper;
