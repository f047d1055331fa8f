//! Prefix-conditioned continuous text diffusion for caption generation.
//!
//! Captions are embedded into a continuous space, noised by a fixed
//! variance schedule, and denoised by a transformer that sees a learned
//! prefix derived from an image feature. Several chains started from
//! different Gaussian noises give candidate captions; the one whose text
//! encoding is most similar to the image feature is kept.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod schedule;
pub mod select;
pub mod tape;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
