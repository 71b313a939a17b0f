//! Slot Transformer Scoring Network: an object-centric encoder built on slot
//! attention, a spatial-broadcast slot decoder and a transformer that scores
//! candidate answers of Raven-style matrix problems, plus a procedural
//! problem generator and the training harness around them.

pub mod error;
pub mod harness;
pub mod image;
pub mod matrixgen;
pub mod model;
pub mod numeric;

pub use error::{Error, Result};
