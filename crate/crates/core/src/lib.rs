//! Orientation-conditioned text-to-image generation on a tiny built-in
//! diffusion backbone.
//!
//! Per-object compass tokens carry a target heading into the prompt, and
//! coupled attention localization restricts each compass/object token pair
//! to a loose box around the object.

pub mod backbone;
pub mod call_attention;
pub mod conditioning;
pub mod dataset;
pub mod generation;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod imaging;
pub mod nn;
pub mod tokenizer;
pub mod training;

pub use error::{CompassError, Result};
