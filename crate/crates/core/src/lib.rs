//! Per-pixel Gaussian-splat maps and the machinery around them.

pub mod data;
pub mod error;
pub mod geometry;
pub mod gsmap;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod splat;

pub use error::{Error, Result};
