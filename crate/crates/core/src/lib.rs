pub mod autograd;
pub mod checkpoint;
pub mod autoencoder;
pub mod backbone;
pub mod conditioning;
pub mod diffusion;
pub mod edge;
pub mod error;
pub mod nn;
pub mod metrics;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod volumes;

pub use error::{Error, Result};
