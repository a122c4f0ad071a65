//! Latent diffusion segmentation with a single-step reverse process.
//!
//! Segmentation masks are compressed by a frozen KL-regularized autoencoder;
//! a conditional denoising U-Net learns to predict the noise of a diffused
//! mask latent given the latent of the input image, and a closed-form latent
//! estimate turns a single noise prediction into a clean latent.

pub mod ae;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod tensor;
