pub mod autograd;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod networks;
pub mod metrics;
pub mod patching;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
