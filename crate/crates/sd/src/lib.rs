//! Stable Diffusion 1.x backend for `refcolor-core`, built on candle.
//!
//! The decoder self-attention layers listed in a [`SiteTable`] are routed
//! through the core attention hook; everything else runs candle's modules.

pub mod backend;
pub mod sites;
pub mod unet;

pub use backend::{SdBackend, CHECKPOINT_ENV};
pub use sites::SiteTable;
pub use unet::HookedUNet;
