//! Spectral radiance field engine.
//!
//! The pipeline learns a radiance field that emits one RGB spectrum map per
//! wavelength band, volume-renders those maps, and fuses them into a
//! white-light RGB image. Alongside the learned path the crate carries the
//! colorimetric conversions, a reverse-mode autodiff engine, losses and
//! metrics, a bit-exact dataset container and an analytic brute-force
//! renderer used as ground truth.

pub mod dataset;
pub mod error;
pub mod field;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod spectral_color;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use image::{RgbImage, SpectrumMapStack};
pub use spectral_color::{BandPartition, CmfTable, Spd};
