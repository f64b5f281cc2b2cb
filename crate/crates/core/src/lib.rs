//! Structured state-space sequence models and a multi-scale temporal S4
//! decoder, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod fft;
pub mod linalg;
pub mod model;
pub mod plot;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
