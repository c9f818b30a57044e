//! Single-view structural 3D completion by masked latent flow matching.
//!
//! The crate covers the full toy-scale pipeline: geometry I/O and sampling,
//! depth-consistency visibility, voxel grids, a small autodiff engine, the
//! occupancy autoencoder and inpainting network, staged sampling, metrics
//! and the command-line driver.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod latent;
pub mod metrics;
pub mod numcore;
pub mod sampler;
pub mod train;
pub mod visibility;
pub mod voxel;

pub use error::{Error, Result};
