//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Values are row-major `f64` buffers. A [`Tape`] records each op as it is
//! executed; [`Tape::backward`] walks the record in reverse and returns
//! gradients for the leaves created with [`Tape::variable`]. The op set is
//! deliberately narrow: dense layers, the normalizations, segment pooling,
//! row gathers and the small grouped products used by per-query attention.

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{Result, TapeError};
pub use gradcheck::{gradient_check, relative_error, GradCheckConfig, GradCheckReport, InputReport};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
