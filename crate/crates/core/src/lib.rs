//! Bidirectional-guided underwater object detection.
//!
//! An enhancement branch (CycleGAN-style image translator plus a detector
//! trained on its outputs) guides a detection branch trained on raw
//! underwater images through feature-level consistency losses.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod detector;
pub mod enhancer;
pub mod eval;
mod error;
pub mod geometry;
pub mod guidance;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
