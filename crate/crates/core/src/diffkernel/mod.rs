//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every trainable component records its forward computation on a [`Tape`]
//! and receives adjoints from [`Tape::backward`]. Hot paths (rasterization,
//! SSIM) plug in as [`CustomOp`]s with hand-written adjoints that are checked
//! against finite differences by [`check_gradients`].

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{check_gradients, check_gradients_multi, GradCheckOptions, GradCheckReport};
pub use tape::{Axis, CustomOp, Gradients, Tape, Var};

pub(crate) use tape::sigmoid;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("contract violation in `{op}`: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
}
