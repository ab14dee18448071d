pub mod datasets;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod losses;
pub mod metrics;
pub mod oracle;
pub mod persistence;
pub mod residual;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
