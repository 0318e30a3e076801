//! Mask-conditioned ControlNet latent diffusion at desk scale: synthetic
//! scenes with oracle masks, a small VAE, a text-conditioned U-Net backbone,
//! the mask-prompt conditioning branch, training loops, metrics and the
//! experiment drivers used by the command-line tool.

pub mod conditioning;
pub mod diffusion_core;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod generation;
pub mod latent_codec;
pub mod optimize;
pub mod raster;
pub mod seeding;
pub mod synthetic_data;
pub mod training;

pub use error::{CoreError, Result};
