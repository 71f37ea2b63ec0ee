pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod unetpp;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
