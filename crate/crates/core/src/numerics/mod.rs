//! Minimal reverse-mode differentiable numerics: dense layers, 3D
//! convolution and its transpose, activations, losses, Adam, and a
//! finite-difference gradient checker.

mod adam;
pub mod conv;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, rel_err, GradCheckReport};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    BadShape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}
