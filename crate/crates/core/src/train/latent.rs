use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slpgen_autodiff::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor};

use super::{check_finite, epoch_rng, EpochRecord, Stage, TrainConfig, TrainReport};
use crate::diffusion::{standard_normal, DdpmKind, LatentDdpm};
use crate::error::{Error, Result};
use crate::geometry::{FpsStrategy, PointCloud};
use crate::nets::{Autoencoder, SparseLatent};

/// Clean latents of every training shape: the centroid-start embedding first, then
/// `variants - 1` random-start embeddings. Features are posterior means.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPool {
    pub shapes: Vec<Vec<SparseLatent>>,
}

impl LatentPool {
    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn centroid(&self) -> impl Iterator<Item = &SparseLatent> {
        self.shapes.iter().map(|v| &v[0])
    }
}

/// Encodes every cloud with the frozen autoencoder (no jitter).
pub fn extract_latents(ae: &Autoencoder, clouds: &[PointCloud], variants: usize, seed: u64) -> Result<LatentPool> {
    if clouds.is_empty() {
        return Err(Error::Argument("no clouds to encode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants = variants.max(1);
    let shapes = clouds
        .iter()
        .map(|c| {
            (0..variants)
                .map(|v| {
                    let s = if v == 0 { FpsStrategy::CentroidStart } else { FpsStrategy::RandomStart(rng.random()) };
                    ae.embed(c, s)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentPool { shapes })
}

/// Root mean square of all entries, the scale that brings the targets near unit variance.
fn rms<'a>(values: impl Iterator<Item = &'a f32>) -> f32 {
    let (mut s, mut n) = (0.0f64, 0usize);
    for &v in values {
        s += f64::from(v) * f64::from(v);
        n += 1;
    }
    ((s / n.max(1) as f64).sqrt() as f32).max(1e-6)
}

fn check_compat(model: &LatentDdpm, ae: &Autoencoder, cfg: &TrainConfig, stage: Stage) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!("config is for stage {:?}, not {stage:?}", cfg.stage)));
    }
    if model.kind() == DdpmKind::Feature && model.data_dim() != ae.config().latent_dim {
        return Err(Error::Config(format!(
            "feature DDPM models {} channels, autoencoder latent has {}",
            model.data_dim(),
            ae.config().latent_dim
        )));
    }
    Ok(())
}

/// Trains the position DDPM on clean latent positions of the frozen autoencoder.
pub fn train_position_ddpm(
    model: &mut LatentDdpm,
    ae: &Autoencoder,
    clouds: &[PointCloud],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if model.kind() != DdpmKind::Position {
        return Err(Error::Config("train_position_ddpm needs a position model".into()));
    }
    check_compat(model, ae, cfg, Stage::PosDdpm)?;
    let pool = extract_latents(ae, clouds, cfg.latent_variants, cfg.seed)?;
    train_on_pool(model, &pool, cfg, on_epoch)
}

/// Trains the feature DDPM on (position, posterior-mean feature) pairs.
pub fn train_feature_ddpm(
    model: &mut LatentDdpm,
    ae: &Autoencoder,
    clouds: &[PointCloud],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if model.kind() != DdpmKind::Feature {
        return Err(Error::Config("train_feature_ddpm needs a feature model".into()));
    }
    check_compat(model, ae, cfg, Stage::FeatDdpm)?;
    let pool = extract_latents(ae, clouds, cfg.latent_variants, cfg.seed)?;
    train_on_pool(model, &pool, cfg, on_epoch)
}

/// Either DDPM on precomputed latents. Each epoch every shape contributes one latent,
/// the centroid-start one with probability `cfg.centroid_fraction`, otherwise a
/// random-start variant. The data scale is reset from the pool.
pub fn train_on_pool(
    model: &mut LatentDdpm,
    pool: &LatentPool,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Argument("empty latent pool".into()));
    }
    let kind = model.kind();
    let target = |l: &SparseLatent| match kind {
        DdpmKind::Position => l.positions_tensor(),
        DdpmKind::Feature => l.features_tensor(),
    };
    let targets: Vec<Vec<Tensor>> = pool.shapes.iter().map(|v| v.iter().map(target).collect()).collect();
    model.set_data_scale(rms(targets.iter().flatten().flat_map(|t| t.data())))?;

    let start = Instant::now();
    let steps = model.schedule().steps();
    let mut adam = Adam::new(model.store(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        adam.config.lr = cfg.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for batch in &batches {
            let mut g = Graph::new();
            let mut sum = None;
            for &i in *batch {
                let variants = pool.shapes[i].len();
                let v = if variants == 1 || rng.random::<f64>() < cfg.centroid_fraction {
                    0
                } else {
                    rng.random_range(1..variants)
                };
                let x0 = &targets[i][v];
                let cond = (kind == DdpmKind::Feature).then(|| pool.shapes[i][v].positions_tensor());
                let t = rng.random_range(1..=steps);
                let eps = standard_normal(&mut rng, x0.shape());
                let l = model.loss_graph(&mut g, x0, cond.as_ref(), t, &eps)?;
                let l = g.scale(l, 1.0 / batch.len() as f32);
                sum = Some(match sum {
                    Some(s) => g.add(s, l)?,
                    None => l,
                });
            }
            let loss = sum.expect("nonempty batch");
            let value = f64::from(g.value(loss).item());
            check_finite(epoch, "diffusion loss", value)?;
            total += value / batches.len() as f64;
            let mut grads = g.backward(loss)?.param_grads(model.store());
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            adam.step(model.store_mut(), &grads)?;
        }
        let record = EpochRecord { epoch, total, cd: Vec::new(), nc: None, kl: None, seconds: t0.elapsed().as_secs_f64() };
        on_epoch(&record);
        report.epochs.push(record);
    }
    report.wall_clock = start.elapsed().as_secs_f64();
    Ok(report)
}
