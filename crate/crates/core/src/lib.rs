//! Individual animal re-identification: a prompt learner that writes
//! per-image identity descriptions, and an image encoder fine-tuned against
//! attention-merged descriptions.

pub mod cli;
pub mod datasets;
pub mod desc_merge;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod params;
pub mod prompt_gen;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
