//! Toy-scale vision transformer laboratory.
//!
//! Builds a plain ViT on a small reverse-mode engine, adds relative position
//! bias providers and a two-parameter Gaussian attention bias, and measures
//! what the model attends to with effective receptive field maps and 2D
//! Gaussian fits.

pub mod audit;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod erf;
mod error;
pub mod fit;
pub mod gaussian_bias;
mod init;
pub mod rpe;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
