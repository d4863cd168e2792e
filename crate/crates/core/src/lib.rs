//! Exemplar-based image colorization with a pretrained latent diffusion
//! denoiser.
//!
//! A grayscale input and a color reference are inverted with DDIM while the
//! denoiser's self-attention features are recorded. Sampling then replaces
//! the output's attention with a dual map (gray-to-gray and
//! colorized-to-color) over the reference's value features, amplified by a
//! classifier-free style guidance between the transferred and plain noise
//! predictions.

pub mod attention;
pub mod backend;
pub mod colorspace;
pub mod diffusion;
pub mod error;
pub mod evalharness;
pub mod guidance;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
