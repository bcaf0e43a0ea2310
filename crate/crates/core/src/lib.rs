//! Tile-classification viewport prediction for 360° video.
//!
//! A multimodal transformer fuses head and eye histories with per-frame
//! visual descriptors, scores every tile of the next `T` frames and picks the
//! viewport-sized window covering the most high-scoring tiles.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod render;
pub mod training;

pub use error::{Error, Result};
