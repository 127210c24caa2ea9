use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use slpgen_autodiff::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor};

use super::loss::{ae_loss_graph, AeLossParts};
use super::{check_finite, epoch_rng, EpochRecord, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::geometry::{fps_points, FpsStrategy, Point, PointCloud};
use crate::nets::Autoencoder;

/// One training example of an epoch: which cloud, its (jittered) latent points and the
/// reparameterization noise.
#[derive(Clone, Debug, PartialEq)]
pub struct AeItem {
    pub index: usize,
    pub latent: Vec<Point>,
    pub eps: Tensor,
}

/// The batches of `epoch`, fully determined by `(cfg.seed, epoch)`.
pub fn plan_ae_epoch(
    model: &Autoencoder,
    clouds: &[PointCloud],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Vec<AeItem>>> {
    let (k, d) = (model.config().latent_points, model.config().latent_dim);
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let strategy = if rng.random::<f64>() < cfg.centroid_fraction {
            FpsStrategy::CentroidStart
        } else {
            FpsStrategy::RandomStart(rng.random())
        };
        let mut batch = Vec::with_capacity(chunk.len());
        for &index in chunk {
            let mut latent = fps_points(clouds[index].positions(), k, strategy)?;
            for p in &mut latent {
                for v in p.iter_mut() {
                    *v += cfg.jitter * rng.sample::<f32, _>(StandardNormal);
                }
            }
            let eps = Tensor::new(vec![k, d], (0..k * d).map(|_| rng.sample(StandardNormal)).collect())?;
            batch.push(AeItem { index, latent, eps });
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Adam on the batch-mean autoencoder loss. `on_epoch` sees every record as it is produced.
pub fn train_autoencoder(
    model: &mut Autoencoder,
    clouds: &[PointCloud],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::Argument("autoencoder training needs at least one cloud".into()));
    }
    let start = Instant::now();
    let mut adam = Adam::new(model.store(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        adam.config.lr = cfg.lr_at(epoch);
        let batches = plan_ae_epoch(model, clouds, cfg, epoch)?;
        let mut sum = AeLossParts::default();
        for batch in &batches {
            let mut g = Graph::new();
            let scale = 1.0 / batch.len() as f32;
            let mut total = None;
            let mut parts = AeLossParts::default();
            for item in batch {
                let cloud = &clouds[item.index];
                let vars = model.forward_graph(&mut g, cloud, &item.latent, Some(&item.eps))?;
                let loss = ae_loss_graph(&mut g, cloud, &vars, cfg.weights)?;
                parts.accumulate(&loss.parts(&g), f64::from(scale));
                let scaled = g.scale(loss.total, scale);
                total = Some(match total {
                    Some(t) => g.add(t, scaled)?,
                    None => scaled,
                });
            }
            let total = total.expect("nonempty batch");
            check_finite(epoch, "autoencoder loss", f64::from(g.value(total).item()))?;
            let grads = g.backward(total)?;
            let mut grads = grads.param_grads(model.store());
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            adam.step(model.store_mut(), &grads)?;
            sum.accumulate(&parts, 1.0 / batches.len() as f64);
        }
        let record = EpochRecord {
            epoch,
            total: sum.total,
            cd: sum.cd,
            nc: Some(sum.nc),
            kl: Some(sum.kl),
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    report.wall_clock = start.elapsed().as_secs_f64();
    Ok(report)
}
