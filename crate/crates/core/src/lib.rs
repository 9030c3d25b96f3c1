//! Mixture-of-experts latent diffusion for single-slice MRI super-resolution.

pub mod checkpoint;
pub mod codec;
pub mod condition;
pub mod diffusion;
pub mod error;
pub mod experts;
pub mod gating;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod records;
pub mod sampler;
pub mod training;

pub use error::{MoeError, Result};
