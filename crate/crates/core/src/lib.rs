//! Diffusion-generated pseudo-samples for episodic few-shot learning.
//!
//! A small denoising diffusion model turns each training image into a
//! near copy ("good", low strength) that joins the source class, or a
//! distorted copy ("bad", higher strength) that forms extra fake classes
//! competing as prototypes during Prototypical-Network training.

pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod diffusion;
pub mod episodic;
pub mod datasets;
pub mod metadm;
pub mod pipeline;
