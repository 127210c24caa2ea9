//! Command line and HTTP front ends for the sparse latent point engine.

pub mod api;
pub mod cli;
