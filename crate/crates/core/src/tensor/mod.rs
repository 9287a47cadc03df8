//! Dense `f64` tensors, reverse-mode gradients, Adam and gradient checking.

mod attention;
mod dense;
pub mod gradcheck;
mod optim;
mod params;
mod tape;

pub use attention::{attend, scaled_dot_attention};
pub use dense::Tensor;
pub use gradcheck::{finite_diff_check, BlockError, GradCheckOptions, GradCheckReport};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
