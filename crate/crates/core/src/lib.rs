//! Spherical window self-attention for LiDAR point clouds.
//!
//! Tokens are grouped into long, narrow radial windows (fixed azimuth and
//! inclination bins running out from the sensor) and into ordinary cubic
//! windows. Half the attention heads work in each, with a relative position
//! bias whose radial bins grow exponentially with distance.
//!
//! Module map:
//! - [`numerics`]: dense matrices, softmax, finite differences
//! - [`geometry`]: point clouds, spherical coordinates, clipping, voxelization
//! - [`partition`]: window keys, bucketing, reach statistics
//! - [`posenc`]: relative position indices, embedding tables, bias
//! - [`attention`]: forward/backward window attention and the head split
//! - [`synth`]: synthetic scenes and brute-force oracles
//! - [`format`]: `SPC1` point-cloud and `SPW1` weight files
//! - [`cli`]: the `sphere-attn` command-line tool

pub mod attention;
pub mod cli;
pub mod error;
pub mod format;
pub mod geometry;
pub mod numerics;
pub mod partition;
pub mod posenc;
pub mod synth;

pub use error::{Error, Result};
