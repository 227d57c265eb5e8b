//! Self-supervised perturbation attacks and neural representation
//! purification, built on a small reverse-mode autodiff engine.

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
