//! Unpaired cross-modality synthesis + segmentation at desk scale:
//! a reverse-mode fp32 tensor engine, the three network roles
//! (generator / discriminator / segmenter), the five training losses,
//! Adam, a two-modality procedural phantom dataset with source-only
//! labels, the four training variants, and segmentation metrics.

pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
