use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |_| store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self { config, step: 0, m: zeros(()), v: zeros(()) }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(AutodiffError::Argument(format!(
                "adam: {} gradients / {} state slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            let p = store.get(id);
            if p.shape() != g.shape() || self.m[id.index()].len() != p.numel() {
                return Err(AutodiffError::Dimension { op: "adam_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum();
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f32]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let mut s = store(&[1.0, 1.0, 1.0]);
        let mut adam = Adam::new(&s, AdamConfig { lr: 0.01, ..Default::default() });
        let g = Tensor::new(vec![3], vec![0.5, -3.0, 1e-3]).unwrap();
        adam.step(&mut s, &[g]).unwrap();
        let p = s.get(s.id("p").unwrap()).data();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - 1.01).abs() < 1e-6);
        assert!((p[2] - 0.99).abs() < 1e-5);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[0.3, -0.7]);
        let before = s.clone();
        let mut adam = Adam::new(&s, AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut s, &[Tensor::zeros(vec![2])]).unwrap();
        }
        assert_eq!(s, before);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store(&[0.1, 0.2, 0.3]);
            let mut adam = Adam::new(&s, AdamConfig::default());
            for k in 0..5 {
                let g = Tensor::new(vec![3], vec![k as f32 * 0.1, -0.2, 0.05]).unwrap();
                adam.step(&mut s, &[g]).unwrap();
            }
            s.checksum()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut s = store(&[0.0, 0.0]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let err = adam.step(&mut s, &[Tensor::zeros(vec![3])]).unwrap_err();
        assert!(matches!(err, AutodiffError::Dimension { op: "adam_step", .. }));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-6);
    }
}
