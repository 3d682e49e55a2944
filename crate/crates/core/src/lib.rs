pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod workflow;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
