//! Minimal reverse-mode differentiation over dense tensors, plus the
//! multilayer perceptron and Adam optimiser built on it.

mod adam;
mod gradcheck;
mod mlp;
mod params;
mod real;
mod tape;
mod tensor;
#[cfg(test)]
mod tests;

pub use adam::{halve_lr_schedule, AdamState};
pub use gradcheck::{finite_diff_check, random_coords};
pub use mlp::{Mlp, MlpLayer};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::{Dtype, Real};
pub use tape::{sigmoid, softplus, Activation, OutOfBounds, Tape, Var};
pub use tensor::Tensor;
