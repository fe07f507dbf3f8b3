//! Desk-scale memorization audit pipeline for 3D latent diffusion models:
//! phantom volume generation, a small 3D latent autoencoder and DDPM, an
//! augmentation-invariant contrastive embedder, and a nearest-neighbor
//! copy audit with a pixel-space NCC baseline.

pub mod audit;
pub mod autoencoder;
pub mod checkpoint;
pub mod contrastive;
pub mod diffusion;
pub mod nn;
pub mod numerics;
pub mod volumes;

pub use numerics::{ParamSet, Tensor};
pub use volumes::Volume;
