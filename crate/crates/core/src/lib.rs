//! Differentiable MPM with a latent-conditioned neural constitutive model.

pub mod autodiff;
mod binio;
pub mod data;
pub mod error;
pub mod infer;
pub mod materials;
pub mod mpm;
pub mod neural;
pub mod tensor3;
pub mod train;

pub use error::{Error, Result};
