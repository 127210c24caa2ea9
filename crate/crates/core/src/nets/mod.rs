//! Network blocks and the sparse latent point autoencoder.

mod autoencoder;
mod blocks;
mod config;
mod layers;

pub use autoencoder::{
    kl_divergence, kl_loss, latent_positions, AeVars, Autoencoder, DecodeVars, Decoded, DecoderLevel, Encoder,
    LatentPosterior, SparseLatent,
};
pub use blocks::{
    repeat_each, zero_scores, Attended, Attention, FtConfig, FtModule, MiniConfig, MiniPointNet, SaConfig, SaModule,
};
pub use config::{AeConfig, LevelConfig};
pub use layers::{Linear, Mlp, LEAK};
