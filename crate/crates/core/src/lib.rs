//! Lifelong learning engine that grows per-block mixtures of projection
//! experts inside a small Vision Transformer.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod vit;
pub mod experts;
pub mod taskdata;
pub mod sampling;
pub mod nas;
pub mod lifelong;

#[cfg(test)]
mod testutil;
