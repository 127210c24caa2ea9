//! Sparse latent point generation: an autoencoder that compresses oriented
//! point clouds into a handful of latent points with features, two latent
//! diffusion models over positions and features, and the editing and
//! evaluation tools built on top of them.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod edit;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nets;
pub mod train;

pub use error::{CheckpointError, Error, Result};
