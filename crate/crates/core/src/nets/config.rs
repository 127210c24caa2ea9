use serde::{Deserialize, Serialize};

use super::blocks::{FtConfig, MiniConfig, SaConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    /// Each point emits `gamma` displaced copies; FPS then keeps half of them.
    pub gamma: usize,
    pub mlp_widths: Vec<usize>,
    /// Multiplier on the raw displacement output.
    pub displacement_scale: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    /// Points per input and output cloud.
    pub points: usize,
    /// Number of sparse latent points `k`.
    pub latent_points: usize,
    /// Feature dimension `d` per latent point.
    pub latent_dim: usize,
    pub sa: Vec<SaConfig>,
    pub mini: MiniConfig,
    pub ft: FtConfig,
    pub head_widths: Vec<usize>,
    pub levels: Vec<LevelConfig>,
    /// Initial bias of the log-variance head.
    pub logvar_init: f32,
}

fn sa(out_points: usize, k: usize, widths: &[usize], attention_width: usize) -> SaConfig {
    SaConfig { out_points, k, mlp_widths: widths.to_vec(), attention_width }
}

fn level(gamma: usize, widths: &[usize], displacement_scale: f32) -> LevelConfig {
    LevelConfig { gamma, mlp_widths: widths.to_vec(), displacement_scale }
}

impl AeConfig {
    /// 512 points, 16 latent points with 48 features, decoder 16 -> 64 -> 256 -> 512.
    pub fn desk() -> Self {
        Self {
            points: 512,
            latent_points: 16,
            latent_dim: 48,
            sa: vec![sa(256, 16, &[32, 32], 32), sa(128, 16, &[64, 64], 32), sa(64, 16, &[64, 64], 32), sa(32, 8, &[128, 128], 32)],
            mini: MiniConfig { k: 8, mlp_widths: vec![32, 32], attention_width: 32 },
            ft: FtConfig { k: 8, mlp_widths: vec![64, 64], attention_width: 32 },
            head_widths: vec![128],
            levels: vec![level(8, &[128, 128], 0.5), level(8, &[128, 128], 0.2), level(4, &[128, 128], 0.08)],
            logvar_init: -4.0,
        }
    }

    /// 2048 points, SA chain 1024, 256, 64, 32 and decoder 16 -> 256 -> 1024 -> 2048.
    pub fn paper() -> Self {
        Self {
            points: 2048,
            latent_points: 16,
            latent_dim: 48,
            sa: vec![
                sa(1024, 16, &[32, 32], 32),
                sa(256, 16, &[64, 64], 32),
                sa(64, 16, &[128, 128], 32),
                sa(32, 8, &[128, 128], 32),
            ],
            mini: MiniConfig { k: 8, mlp_widths: vec![32, 32], attention_width: 32 },
            ft: FtConfig { k: 8, mlp_widths: vec![64, 64], attention_width: 32 },
            head_widths: vec![128],
            levels: vec![level(32, &[128, 128], 0.5), level(8, &[128, 128], 0.15), level(4, &[128, 128], 0.05)],
            logvar_init: -4.0,
        }
    }

    /// 32 points, 4 latent points: small enough for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            points: 32,
            latent_points: 4,
            latent_dim: 6,
            sa: vec![sa(16, 4, &[8], 4), sa(8, 4, &[8], 4)],
            mini: MiniConfig { k: 3, mlp_widths: vec![6], attention_width: 4 },
            ft: FtConfig { k: 3, mlp_widths: vec![6], attention_width: 4 },
            head_widths: vec![8],
            levels: vec![level(4, &[10], 0.5), level(4, &[10], 0.2), level(4, &[10], 0.1)],
            logvar_init: -4.0,
        }
    }

    /// Point counts of every decoder level output, starting after the latent points.
    pub fn level_counts(&self) -> Vec<usize> {
        let mut n = self.latent_points;
        self.levels
            .iter()
            .map(|l| {
                n = n * l.gamma / 2;
                n
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.latent_points < 2 || self.latent_dim == 0 {
            return fail(format!("need k >= 2 and d >= 1, got k = {}, d = {}", self.latent_points, self.latent_dim));
        }
        if self.sa.is_empty() || self.levels.is_empty() {
            return fail("encoder and decoder need at least one level each".into());
        }
        let mut prev = self.points;
        for (i, s) in self.sa.iter().enumerate() {
            if s.out_points == 0 || s.out_points > prev || s.k == 0 || s.k > prev {
                return fail(format!("SA level {i}: {} centers with K = {} from {prev} points", s.out_points, s.k));
            }
            if s.mlp_widths.is_empty() {
                return fail(format!("SA level {i} has no MLP layers"));
            }
            prev = s.out_points;
        }
        if self.latent_points > self.points {
            return fail(format!("{} latent points from {} input points", self.latent_points, self.points));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.gamma < 2 || l.gamma % 2 != 0 {
                return fail(format!("decoder level {i}: upsampling factor {} must be even and >= 2", l.gamma));
            }
            if l.mlp_widths.is_empty() || !(l.displacement_scale > 0.0) {
                return fail(format!("decoder level {i} needs MLP layers and a positive displacement scale"));
            }
        }
        let last = *self.level_counts().last().expect("levels");
        if last != self.points {
            return fail(format!("decoder chain {:?} ends at {last}, not {} points", self.level_counts(), self.points));
        }
        if self.mini.k == 0 || self.ft.k == 0 || self.mini.mlp_widths.is_empty() || self.ft.mlp_widths.is_empty() {
            return fail("mini PointNet and FT need K >= 1 and MLP layers".into());
        }
        Ok(())
    }
}
