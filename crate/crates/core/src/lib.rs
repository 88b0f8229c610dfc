pub mod adapters;
pub mod bench;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod heads;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
