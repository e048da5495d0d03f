//! Dense `f64` linear algebra with reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use gradcheck::{finite_difference_check, FdReport};
pub use matrix::Matrix;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BackwardFault, Gradients, Segment, Tape, Var};

#[cfg(test)]
use tape::gelu;

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Label value marking positions excluded from cross entropy.
pub const IGNORE_INDEX: i64 = -1;

#[cfg(test)]
mod tests;
