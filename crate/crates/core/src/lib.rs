pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod generation;
pub mod network;
pub mod render;
pub mod training;

pub use error::{Error, Result};
