use rand::Rng;
use slpgen_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

/// Slope of the leaky ReLU used between hidden layers.
pub const LEAK: f32 = 0.2;

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Uniform initialization in `+-1/sqrt(input)`, bias included.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_bound(store, name, input, output, 1.0 / (input as f32).sqrt(), rng)
    }

    /// Weights uniform in `+-bound`; biases keep the `1/sqrt(input)` range.
    pub fn with_bound(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bound: f32,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = (0..input * output).map(|_| rng.random_range(-bound..bound)).collect();
        let bb = 1.0 / (input as f32).sqrt();
        let b = (0..output).map(|_| rng.random_range(-bb..bb)).collect();
        let weight = store.add(format!("{name}.w"), Tensor::new(vec![input, output], w)?)?;
        let bias = store.add(format!("{name}.b"), Tensor::new(vec![output], b)?)?;
        Ok(Self { weight, bias, input, output })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }
}

/// Stack of [`Linear`] layers with leaky ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    /// Whether the activation is also applied after the last layer.
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        widths: &[usize],
        activate_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("{name}.{i}");
            let layer = if i + 1 < widths.len() || activate_last {
                // He-uniform for layers feeding a leaky ReLU
                let bound = (6.0 / ((1.0 + LEAK * LEAK) * prev as f32)).sqrt();
                Linear::with_bound(store, &name, prev, w, bound, rng)?
            } else {
                Linear::new(store, &name, prev, w, rng)?
            };
            layers.push(layer);
            prev = w;
        }
        Ok(Self { layers, activate_last })
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last || self.activate_last {
                x = g.leaky_relu(x, LEAK);
            }
        }
        Ok(x)
    }
}
