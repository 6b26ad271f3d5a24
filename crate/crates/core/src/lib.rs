//! Reconstruction toolkit for linear imaging inverse problems.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod instance;
pub mod io;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod operators;
pub mod rng;
pub mod selfsup;
pub mod solvers;
pub mod tensor;
pub mod train;
pub mod uq;

pub use error::{Error, Result};
pub use tensor::Tensor;
