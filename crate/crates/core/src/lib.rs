pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use rng::RngState;
pub use tensor::{Scalar, Tensor};
