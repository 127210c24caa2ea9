//! Training: the autoencoder first, then the two latent diffusion models on
//! top of the frozen autoencoder.

mod ae;
mod check;
mod latent;
mod loss;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ae::{plan_ae_epoch, train_autoencoder, AeItem};
pub use check::{ae_directional_gradcheck, DirectionalCheck};
pub use latent::{extract_latents, train_feature_ddpm, train_on_pool, train_position_ddpm, LatentPool};
pub use loss::{ae_loss, ae_loss_graph, AeLossParts, AeLossVars, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ae,
    PosDdpm,
    FeatDdpm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// When set, the learning rate follows a cosine from `lr` down to this value.
    pub lr_final: Option<f32>,
    pub weights: LossWeights,
    /// Standard deviation of the Gaussian jitter on latent positions (autoencoder stage).
    pub jitter: f32,
    /// Probability that a batch uses centroid-start FPS rather than random-start.
    pub centroid_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f32>,
    /// Latents precomputed per shape for the diffusion stages (one centroid-start, the rest random-start).
    pub latent_variants: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_stage(Stage::Ae)
    }
}

impl TrainConfig {
    /// Settings tuned on the 200-shape synthetic set at desk scale.
    pub fn for_stage(stage: Stage) -> Self {
        let (epochs, batch_size, lr) = if stage == Stage::Ae { (60, 8, 2e-3) } else { (1000, 16, 1e-3) };
        Self {
            stage,
            epochs,
            batch_size,
            lr,
            lr_final: Some(1e-5),
            weights: LossWeights::default(),
            jitter: 0.04,
            centroid_fraction: 0.5,
            grad_clip: Some(10.0),
            latent_variants: 4,
            seed: 0,
        }
    }

    /// Learning rate used during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.lr_final {
            Some(end) if self.epochs > 1 => {
                let t = epoch.min(self.epochs - 1) as f32 / (self.epochs - 1) as f32;
                end + 0.5 * (self.lr - end) * (1.0 + (std::f32::consts::PI * t).cos())
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.lr_final.is_some_and(|f| !(f > 0.0 && f <= self.lr)) {
            return bad("lr_final must lie in (0, lr]");
        }
        if !(self.weights.nc >= 0.0 && self.weights.kl >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if !(self.jitter >= 0.0) {
            return bad("jitter must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.centroid_fraction) {
            return bad("centroid_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Reads TOML or JSON, chosen by the file extension (`.json` is JSON, anything else TOML).
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss record for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    /// Autoencoder terms; empty for the diffusion stages.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cd: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_total(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Deterministic per-epoch stream derived from the run seed.
pub(crate) fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub(crate) fn check_finite(epoch: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Training { epoch, message: format!("{what} is {v}") })
    }
}
