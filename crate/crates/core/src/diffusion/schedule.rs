use serde::{Deserialize, Serialize};
use slpgen_autodiff::Tensor;

use crate::error::{arg, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaShape {
    #[default]
    Linear,
}

/// Everything needed to rebuild a [`NoiseSchedule`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub shape: BetaShape,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02, shape: BetaShape::Linear }
    }
}

impl ScheduleConfig {
    /// The default range stretched to `steps` so the total noise `sum(beta)` matches the
    /// 1000-step schedule; `ScheduleConfig::scaled(100)` is the desk setting.
    pub fn scaled(steps: usize) -> Self {
        let f = 1000.0 / steps.max(1) as f64;
        let d = Self::default();
        Self { steps, beta_start: d.beta_start * f, beta_end: (d.beta_end * f).min(0.999), shape: d.shape }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.shape)
    }
}

/// Precomputed DDPM tables. Timesteps are 1-based: `beta(1)` is the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, shape: BetaShape) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(arg("schedule needs at least one step"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(arg(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let betas: Vec<f64> = match shape {
        BetaShape::Linear if steps == 1 => vec![beta_start],
        BetaShape::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigmas = betas.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        config: ScheduleConfig { steps, beta_start, beta_end, shape },
        betas,
        alphas,
        alpha_bars,
        sigmas,
    })
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(arg(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(arg(format!("noise shape {:?} vs data {:?}", eps.shape(), x0.shape())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| (a * f64::from(x) + b * f64::from(e)) as f32).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// `(s, c)` with `mu = s (x_t - c eps)`: `s = 1/sqrt(alpha)`, `c = beta / sqrt(1 - alpha_bar)`.
pub fn mean_coefficients(alpha: f64, beta: f64, alpha_bar: f64) -> (f64, f64) {
    (1.0 / alpha.sqrt(), beta / (1.0 - alpha_bar).sqrt())
}

/// Posterior mean `(x_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t)`.
pub fn reverse_mean(x_t: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if x_t.shape() != eps.shape() {
        return Err(arg(format!("noise prediction {:?} vs state {:?}", eps.shape(), x_t.shape())));
    }
    let (s, c) = mean_coefficients(sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
    let data = x_t.data().iter().zip(eps.data()).map(|(&x, &e)| (s * (f64::from(x) - c * f64::from(e))) as f32).collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}
