//! File formats and the command line for `sketchmotion-core`.
//!
//! Checkpoints and adapters use the `FSKT` tensor container, frames are
//! binary PGM, and runs are recorded as flat `key=value` manifests.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod pgm;

pub use error::{Error, Result};
pub use manifest::Manifest;
pub use sketchmotion_core as core;
