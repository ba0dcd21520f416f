//! Weakly supervised patch-level detection of tooth marks on tongue images.
//!
//! An image is a bag of patches. A vision-transformer encoder embeds every
//! patch, an instance head scores each one, and the most positive patch
//! stands in for the whole image during training. At inference the scores
//! become boxes and the encoder's attention becomes a heat map.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod extraction;
pub mod inference;
pub mod losses;
pub mod mil;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
