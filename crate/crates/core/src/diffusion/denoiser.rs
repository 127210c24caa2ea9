use rand::Rng;
use serde::{Deserialize, Serialize};
use slpgen_autodiff::{Graph, ParamStore, Tensor, Var};

use crate::error::{arg, Result};
use crate::nets::{Linear, MiniConfig, MiniPointNet, Mlp, LEAK};

/// Which latent quantity a denoiser models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DdpmKind {
    /// Noisy positions `k x 3`, grouped by themselves.
    Position,
    /// Noisy features `k x d`, conditioned on (and grouped by) clean positions.
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub kind: DdpmKind,
    /// Width of the denoised rows: 3 for positions, `d` for features.
    pub data_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    /// Residual point blocks, each a mini PointNet over the grouping positions.
    pub blocks: usize,
    pub mini: MiniConfig,
}

impl DenoiserConfig {
    pub fn position() -> Self {
        Self {
            kind: DdpmKind::Position,
            data_dim: 3,
            time_dim: 32,
            hidden: 128,
            blocks: 3,
            mini: MiniConfig { k: 8, mlp_widths: vec![64, 64], attention_width: 32 },
        }
    }

    /// Narrower than the position network: conditioning on positions leaves less to model.
    pub fn feature(dim: usize) -> Self {
        Self { kind: DdpmKind::Feature, data_dim: dim, hidden: 96, blocks: 2, ..Self::position() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == DdpmKind::Position && self.data_dim != 3 {
            return Err(arg("a position denoiser has data_dim 3"));
        }
        if self.data_dim == 0 || self.hidden == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(arg("denoiser widths must be positive and time_dim even"));
        }
        if self.mini.k == 0 || self.mini.mlp_widths.is_empty() {
            return Err(arg("denoiser mini PointNet needs k >= 1 and at least one layer"));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        match self.kind {
            DdpmKind::Position => 3,
            DdpmKind::Feature => 3 + self.data_dim,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    mini: MiniPointNet,
    mix: Linear,
}

/// Noise predictor `eps(x_t, t)` or `eps(f_t, x, t)`. The timestep passes a
/// sinusoidal embedding and an MLP, and is added as a bias to the per-point
/// hidden features at the input and in every block.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    time: Mlp,
    input: Linear,
    blocks: Vec<Block>,
    output: Mlp,
}

const MAX_PERIOD: f32 = 10_000.0;

impl Denoiser {
    pub fn new(store: &mut ParamStore, name: &str, config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let time = Mlp::new(store, &format!("{name}.time"), config.time_dim, &[h, h], false, rng)?;
        let input = Linear::new(store, &format!("{name}.in"), config.input_dim(), h, rng)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let mini = MiniPointNet::new(store, &format!("{name}.block{i}.mini"), config.mini.clone(), h, rng)?;
            let mix = Linear::new(store, &format!("{name}.block{i}.mix"), h + mini.out_features(), h, rng)?;
            blocks.push(Block { mini, mix });
        }
        let output = Mlp::new(store, &format!("{name}.out"), h, &[h, config.data_dim], false, rng)?;
        Ok(Self { config, time, input, blocks, output })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Predicted noise, same shape as `x_t`. Feature denoisers need `cond` (clean positions).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_t: Var, cond: Option<Var>, t: usize) -> Result<Var> {
        let (k, dim) = (g.value(x_t).rows(), g.value(x_t).cols());
        if dim != self.config.data_dim {
            return Err(arg(format!("denoiser expects {} columns, got {dim}", self.config.data_dim)));
        }
        let (group_pos, inp) = match (self.config.kind, cond) {
            (DdpmKind::Position, None) => (x_t, x_t),
            (DdpmKind::Feature, Some(c)) => {
                if g.value(c).rows() != k || g.value(c).cols() != 3 {
                    return Err(arg(format!("conditioning positions must be {k}x3, got {:?}", g.value(c).shape())));
                }
                (c, g.concat(&[c, x_t], 1)?)
            }
            (DdpmKind::Position, Some(_)) => return Err(arg("position denoiser takes no conditioning")),
            (DdpmKind::Feature, None) => return Err(arg("feature denoiser needs conditioning positions")),
        };
        let tv = g.constant(Tensor::new(vec![1, 1], vec![t as f32])?);
        let temb = g.sinusoidal(tv, self.config.time_dim, MAX_PERIOD)?;
        let temb = self.time.forward(g, store, temb)?;

        let h0 = self.input.forward(g, store, inp)?;
        let h0 = g.add_bias(h0, temb)?;
        let mut h = g.leaky_relu(h0, LEAK);
        for b in &self.blocks {
            let m = b.mini.forward(g, store, group_pos, Some(h))?;
            let cat = g.concat(&[h, m], 1)?;
            let u = b.mix.forward(g, store, cat)?;
            let u = g.add_bias(u, temb)?;
            let u = g.leaky_relu(u, LEAK);
            h = g.add(h, u)?;
        }
        self.output.forward(g, store, h)
    }
}
