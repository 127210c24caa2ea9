//! Denoising diffusion over the sparse latent: one model for the `k x 3`
//! positions, one for the `k x d` features conditioned on the positions.
//!
//! Each model works on data divided by a stored global scale, so both run on
//! roughly unit-variance inputs; samplers take and return unscaled values.

mod denoiser;
mod schedule;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use slpgen_autodiff::{Graph, ParamStore, Tensor, Var};

pub use denoiser::{DdpmKind, Denoiser, DenoiserConfig};
pub use schedule::{make_schedule, mean_coefficients, q_sample, reverse_mean, BetaShape, NoiseSchedule, ScheduleConfig};

use crate::error::{arg, Result};
use crate::geometry::Point;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdpmConfig {
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl DdpmConfig {
    /// Desk defaults: 100 steps.
    pub fn position() -> Self {
        Self { denoiser: DenoiserConfig::position(), schedule: ScheduleConfig::scaled(100) }
    }

    pub fn feature(dim: usize) -> Self {
        Self { denoiser: DenoiserConfig::feature(dim), schedule: ScheduleConfig::scaled(100) }
    }
}

/// A trained (or training) latent DDPM: weights, schedule and data scale.
#[derive(Clone, Debug)]
pub struct LatentDdpm {
    config: DdpmConfig,
    store: ParamStore,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    data_scale: f32,
}

impl LatentDdpm {
    pub fn new(config: DdpmConfig, seed: u64) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let name = match config.denoiser.kind {
            DdpmKind::Position => "pos",
            DdpmKind::Feature => "feat",
        };
        let denoiser = Denoiser::new(&mut store, name, config.denoiser.clone(), &mut rng)?;
        Ok(Self { config, store, denoiser, schedule, data_scale: 1.0 })
    }

    pub fn config(&self) -> &DdpmConfig {
        &self.config
    }

    pub fn kind(&self) -> DdpmKind {
        self.config.denoiser.kind
    }

    pub fn data_dim(&self) -> usize {
        self.config.denoiser.data_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn data_scale(&self) -> f32 {
        self.data_scale
    }

    pub fn set_data_scale(&mut self, scale: f32) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(arg(format!("data scale must be positive, got {scale}")));
        }
        self.data_scale = scale;
        Ok(())
    }

    fn check_cond(&self, rows: usize, cond: Option<&Tensor>) -> Result<()> {
        match (self.kind(), cond) {
            (DdpmKind::Position, None) => Ok(()),
            (DdpmKind::Feature, Some(c)) if c.shape() == [rows, 3] => Ok(()),
            (DdpmKind::Feature, Some(c)) => Err(arg(format!("conditioning must be {rows}x3, got {:?}", c.shape()))),
            (DdpmKind::Feature, None) => Err(arg("feature DDPM needs conditioning positions")),
            (DdpmKind::Position, Some(_)) => Err(arg("position DDPM takes no conditioning")),
        }
    }

    /// Graph of `mean((eps - eps_theta(q_sample(x0 / scale, t, eps), t))^2)`; `x0` unscaled.
    pub fn loss_graph(&self, g: &mut Graph, x0: &Tensor, cond: Option<&Tensor>, t: usize, eps: &Tensor) -> Result<Var> {
        self.check_cond(x0.rows(), cond)?;
        let scaled = scale_tensor(x0, 1.0 / self.data_scale);
        let x_t = g.constant(q_sample(&scaled, t, eps, &self.schedule)?);
        let c = cond.map(|c| g.constant(c.clone()));
        let pred = self.denoiser.forward(g, &self.store, x_t, c, t)?;
        let target = g.constant(eps.clone());
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff);
        Ok(g.mean(sq))
    }

    /// Value of [`Self::loss_graph`].
    pub fn loss(&self, x0: &Tensor, cond: Option<&Tensor>, t: usize, eps: &Tensor) -> Result<f64> {
        let mut g = Graph::inference();
        let l = self.loss_graph(&mut g, x0, cond, t, eps)?;
        Ok(f64::from(g.value(l).item()))
    }

    /// Noise prediction on the model's (scaled) state.
    pub fn predict(&self, x_t: &Tensor, cond: Option<&Tensor>, t: usize) -> Result<Tensor> {
        self.schedule.check_step(t)?;
        self.check_cond(x_t.rows(), cond)?;
        let mut g = Graph::inference();
        let x = g.constant(x_t.clone());
        let c = cond.map(|c| g.constant(c.clone()));
        let out = self.denoiser.forward(&mut g, &self.store, x, c, t)?;
        Ok(g.value(out).clone())
    }

    /// The model with its conditioning bound, as a sampler input.
    pub fn conditioned<'a>(&'a self, cond: Option<&'a Tensor>) -> Conditioned<'a> {
        Conditioned { model: self, cond }
    }
}

/// Anything that predicts the noise in a state at step `t`.
pub trait EpsPredictor {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// A [`LatentDdpm`] with fixed conditioning.
#[derive(Clone, Copy, Debug)]
pub struct Conditioned<'a> {
    model: &'a LatentDdpm,
    cond: Option<&'a Tensor>,
}

impl EpsPredictor for Conditioned<'_> {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.model.predict(x_t, self.cond, t)
    }
}

/// `mean((eps - model(q_sample(x0, t, eps), t))^2)` for any predictor, on model-space data.
pub fn simple_loss(model: &dyn EpsPredictor, x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<f64> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let pred = model.predict_eps(&x_t, t)?;
    if pred.shape() != eps.shape() {
        return Err(arg(format!("prediction {:?} vs noise {:?}", pred.shape(), eps.shape())));
    }
    let sum: f64 = pred.data().iter().zip(eps.data()).map(|(&p, &e)| f64::from(p - e).powi(2)).sum();
    Ok(sum / eps.numel() as f64)
}

pub(crate) fn scale_tensor(t: &Tensor, s: f32) -> Tensor {
    let data = t.data().iter().map(|v| v * s).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

pub fn standard_normal(rng: &mut (impl Rng + ?Sized), shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

/// `x_{t-1} = mu_theta(x_t, t) + sigma_t z`. `z` is ignored at `t = 1`; `None` means `z = 0`.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    model: &dyn EpsPredictor,
    sched: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    let eps = model.predict_eps(x_t, t)?;
    let mut mean = reverse_mean(x_t, t, &eps, sched)?;
    if let (Some(z), true) = (z, t > 1) {
        if z.shape() != mean.shape() {
            return Err(arg(format!("noise {:?} vs state {:?}", z.shape(), mean.shape())));
        }
        let s = sched.sigma(t) as f32;
        for (m, zv) in mean.data_mut().iter_mut().zip(z.data()) {
            *m += s * zv;
        }
    }
    Ok(mean)
}

/// Full reverse chain from `x_T`. Without an rng every step is noise-free (`sigma = 0`).
pub fn run_reverse<R: Rng + ?Sized>(
    model: &dyn EpsPredictor,
    sched: &NoiseSchedule,
    x_t: Tensor,
    mut rng: Option<&mut R>,
) -> Result<Tensor> {
    let mut x = x_t;
    for t in (1..=sched.steps()).rev() {
        let z = match rng.as_deref_mut() {
            Some(r) if t > 1 => Some(standard_normal(r, x.shape())),
            _ => None,
        };
        x = reverse_step(&x, t, model, sched, z.as_ref())?;
    }
    Ok(x)
}

fn require(model: &LatentDdpm, kind: DdpmKind) -> Result<()> {
    if model.kind() != kind {
        return Err(arg(format!("expected a {kind:?} DDPM, got {:?}", model.kind())));
    }
    Ok(())
}

/// `k` latent positions from the position DDPM.
pub fn sample_positions<R: Rng + ?Sized>(model: &LatentDdpm, k: usize, rng: &mut R) -> Result<Vec<Point>> {
    require(model, DdpmKind::Position)?;
    if k < 2 {
        return Err(arg("need at least 2 latent points"));
    }
    let x_t = standard_normal(rng, &[k, 3]);
    let x = run_reverse(&model.conditioned(None), model.schedule(), x_t, Some(rng))?;
    Ok(scale_tensor(&x, model.data_scale()).to_points())
}

fn check_positions(x: &[Point]) -> Result<Tensor> {
    if x.len() < 2 || x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(arg("conditioning needs at least 2 finite positions"));
    }
    Ok(Tensor::from_points(x))
}

/// Features `k x d` for the given positions from the feature DDPM.
pub fn sample_features<R: Rng + ?Sized>(model: &LatentDdpm, x: &[Point], rng: &mut R) -> Result<Tensor> {
    require(model, DdpmKind::Feature)?;
    let cond = check_positions(x)?;
    let f_t = standard_normal(rng, &[x.len(), model.data_dim()]);
    let f = run_reverse(&model.conditioned(Some(&cond)), model.schedule(), f_t, Some(rng))?;
    Ok(scale_tensor(&f, model.data_scale()))
}

/// Regenerates the rows of `f_known` flagged in `regenerate`, keeping the others.
///
/// Inpainting in the style of DDPM image inpainting: after every reverse step the
/// kept rows are replaced by the forward-diffused known values at the new step, so
/// the free rows are denoised in the context of the kept ones. Kept rows of the
/// result are copied from `f_known` unchanged. With every row free this is exactly
/// [`sample_features`] (same draws); with none free it returns `f_known`.
pub fn partial_resample<R: Rng + ?Sized>(
    model: &LatentDdpm,
    x: &[Point],
    f_known: &Tensor,
    regenerate: &[bool],
    rng: &mut R,
) -> Result<Tensor> {
    require(model, DdpmKind::Feature)?;
    let (k, d) = (x.len(), model.data_dim());
    if regenerate.len() != k {
        return Err(arg(format!("mask has {} entries for {k} latent points", regenerate.len())));
    }
    if f_known.shape() != [k, d] {
        return Err(arg(format!("known features must be {k}x{d}, got {:?}", f_known.shape())));
    }
    if !regenerate.iter().any(|&r| r) {
        return Ok(f_known.clone());
    }
    if regenerate.iter().all(|&r| r) {
        return sample_features(model, x, rng);
    }
    let cond = check_positions(x)?;
    let sched = model.schedule();
    let net = model.conditioned(Some(&cond));
    let known = scale_tensor(f_known, 1.0 / model.data_scale());
    let keep_known = |f: &mut Tensor, t: usize, rng: &mut R| -> Result<()> {
        let noisy = q_sample(&known, t, &standard_normal(rng, &[k, d]), sched)?;
        for (i, _) in regenerate.iter().enumerate().filter(|(_, &r)| !r) {
            f.data_mut()[i * d..(i + 1) * d].copy_from_slice(noisy.row(i));
        }
        Ok(())
    };

    let mut f = standard_normal(rng, &[k, d]);
    keep_known(&mut f, sched.steps(), rng)?;
    for t in (1..=sched.steps()).rev() {
        let z = (t > 1).then(|| standard_normal(rng, &[k, d]));
        f = reverse_step(&f, t, &net, sched, z.as_ref())?;
        if t > 1 {
            keep_known(&mut f, t - 1, rng)?;
        }
    }
    let mut out = scale_tensor(&f, model.data_scale());
    for (i, _) in regenerate.iter().enumerate().filter(|(_, &r)| !r) {
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(f_known.row(i));
    }
    Ok(out)
}
