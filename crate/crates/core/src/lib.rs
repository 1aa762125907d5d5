pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod memory;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
