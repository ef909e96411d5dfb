//! Contrastive shadow removal.
//!
//! A shadow region is cut out of the image with its mask, brightened by the
//! DeShadower network, composited back, and cleaned up by a full-frame
//! Refinement network. In the weakly-supervised mode the DeShadower learns from
//! an Illumination generator/critic pair through patchwise InfoNCE; in the
//! supervised mode augmented ground truth replaces the Illumination network.

pub mod augmentation;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod io;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod training;

pub use candle_core;
pub use error::{Error, Result};
