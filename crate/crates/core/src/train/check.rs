use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use slpgen_autodiff::gradcheck::NORM_FLOOR;
use slpgen_autodiff::{Graph, Tensor};

use super::loss::{ae_loss_graph, LossWeights};
use crate::data::{random_spec, sample_shape, ShapeKind};
use crate::error::Result;
use crate::geometry::{fps_points, normalize_cloud, FpsStrategy, Point, PointCloud};
use crate::nets::{AeConfig, Autoencoder};

/// One directional finite-difference probe of the full autoencoder loss.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalCheck {
    /// `grad . v` from the backward pass.
    pub analytic: f64,
    /// Fourth-order central difference of `L(theta + t v)` at `t = 0`.
    pub numeric: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub rel_error: f64,
}

struct Probe {
    loss: f64,
    signature: u64,
}

fn probe(model: &Autoencoder, cloud: &PointCloud, latent: &[Point], eps: &Tensor) -> Result<Probe> {
    let mut g = Graph::new();
    let vars = model.forward_graph(&mut g, cloud, latent, Some(eps))?;
    let loss = ae_loss_graph(&mut g, cloud, &vars, LossWeights::default())?;
    Ok(Probe { loss: f64::from(g.value(loss.total).item()), signature: g.discrete_signature() })
}

fn shifted(model: &Autoencoder, dir: &[Tensor], step: f32) -> Autoencoder {
    let mut m = model.clone();
    let ids: Vec<_> = m.store().ids().collect();
    for (id, d) in ids.into_iter().zip(dir) {
        for (w, v) in m.store_mut().get_mut(id).data_mut().iter_mut().zip(d.data()) {
            *w += step * v;
        }
    }
    m
}

/// Checks the gradient of the complete training loss (all Chamfer levels, normal
/// consistency, KL, reparameterization) along a random unit direction in parameter
/// space. Returns `None` when the perturbation changes any discrete choice (FPS,
/// neighbor sets, nearest matches, activation branches), since finite differences
/// are meaningless across such a switch.
pub fn ae_directional_gradcheck(config: &AeConfig, seed: u64, h: f32) -> Result<Option<DirectionalCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Autoencoder::new(config.clone(), rng.random())?;
    let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
    let cloud = normalize_cloud(&sample_shape(&random_spec(kind, &mut rng), config.points)?);
    let latent = fps_points(cloud.positions(), config.latent_points, FpsStrategy::RandomStart(rng.random()))?;
    let (k, d) = (config.latent_points, config.latent_dim);
    let eps = Tensor::new(vec![k, d], (0..k * d).map(|_| rng.sample(StandardNormal)).collect())?;

    let mut g = Graph::new();
    let vars = model.forward_graph(&mut g, &cloud, &latent, Some(&eps))?;
    let loss = ae_loss_graph(&mut g, &cloud, &vars, LossWeights::default())?;
    let signature = g.discrete_signature();
    let grads = g.backward(loss.total)?.param_grads(model.store());

    let mut dir: Vec<Tensor> = grads
        .iter()
        .map(|t| Tensor::new(t.shape().to_vec(), (0..t.numel()).map(|_| rng.sample(StandardNormal)).collect()))
        .collect::<std::result::Result<_, _>>()?;
    let norm = dir.iter().flat_map(|t| t.data()).map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    for t in &mut dir {
        for v in t.data_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    let analytic: f64 =
        grads.iter().zip(&dir).flat_map(|(g, v)| g.data().iter().zip(v.data())).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();

    let mut at = [0.0f64; 4];
    for (slot, step) in at.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
        let p = probe(&shifted(&model, &dir, step * h), &cloud, &latent, &eps)?;
        if p.signature != signature {
            return Ok(None);
        }
        *slot = p.loss;
    }
    let numeric = (at[0] - 8.0 * at[1] + 8.0 * at[2] - at[3]) / (12.0 * f64::from(h));
    let denom = analytic.abs().max(numeric.abs()).max(f64::from(NORM_FLOOR));
    Ok(Some(DirectionalCheck { analytic, numeric, rel_error: (analytic - numeric).abs() / denom }))
}
