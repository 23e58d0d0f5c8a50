//! Lossless image compression by next-subpixel prediction.
//!
//! An image is cut into patches, each patch is flattened into symbol
//! sequences, and every symbol is range-coded against the distribution a
//! [`provider::ProbabilityProvider`] predicts from the prompt and the symbols
//! before it. Decoding replays the same predictions.

pub mod bench;
pub mod coder;
pub mod container;
pub mod error;
pub mod image;
pub mod pnm;
pub mod provider;
pub mod token;

pub use error::{Error, Result};
