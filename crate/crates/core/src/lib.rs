//! Multi-spectral band synthesis with a spatio-spectral attention WGAN.
//!
//! A generator synthesizes a missing high-resolution SWIR band from the
//! concurrent G, R and NIR bands, conditioned on a spatial attention map that
//! the critic extracts from an upsampled coarse SWIR band (or a substitute
//! band). The crate covers the raster container, synthetic paired data,
//! the networks, the loss stack, training, tiled scene synthesis and the
//! quality metrics used to evaluate it.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod optim;
pub mod raster;
pub mod synthesis;
pub mod training;

#[cfg(test)]
mod testkit;

pub use error::{Error, Result};
pub use raster::{BinaryMask, MultiBandRaster};
