//! Transductive classification of probability feature vectors by
//! Dirichlet-mixture clustering.

pub mod error;
pub mod io;
pub mod matching;
pub mod matrix;
pub mod mle;
pub mod model;
pub mod solvers;
pub mod specfun;
pub mod tasks;

pub use error::{Error, Result};
pub use matrix::Matrix;
