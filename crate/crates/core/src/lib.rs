//! Token-wise value adapters and two-stage disentangling inference on a
//! toy text-conditioned latent diffusion model.
//!
//! The crate is generic over the scalar type: `f64` for verification,
//! `f32` for end-to-end runs.

pub mod adapters;
pub mod analysis;
pub mod container;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod loda;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod text;

pub use error::{Error, Result};
pub use tokensplit_tensor as tensor;
