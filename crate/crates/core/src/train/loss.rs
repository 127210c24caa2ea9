use serde::{Deserialize, Serialize};
use slpgen_autodiff::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::losses::{chamfer_loss, normal_consistency_loss};
use crate::geometry::{fps_points, FpsStrategy, Point, PointCloud};
use crate::nets::{kl_loss, AeVars, LatentPosterior};

/// Weights of the non-Chamfer autoencoder terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub nc: f32,
    pub kl: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { nc: 0.1, kl: 1e-5 }
    }
}

/// Unweighted loss terms; `total` applies the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AeLossParts {
    pub total: f64,
    /// One Chamfer term per decoder level, the last against the full input.
    pub cd: Vec<f64>,
    pub nc: f64,
    pub kl: f64,
}

impl AeLossParts {
    pub fn weighted_sum(&self, w: LossWeights) -> f64 {
        self.cd.iter().sum::<f64>() + f64::from(w.nc) * self.nc + f64::from(w.kl) * self.kl
    }

    pub(crate) fn accumulate(&mut self, other: &AeLossParts, scale: f64) {
        if self.cd.is_empty() {
            self.cd = vec![0.0; other.cd.len()];
        }
        self.total += scale * other.total;
        for (a, b) in self.cd.iter_mut().zip(&other.cd) {
            *a += scale * b;
        }
        self.nc += scale * other.nc;
        self.kl += scale * other.kl;
    }
}

/// Graph handles of the loss terms.
#[derive(Clone, Debug)]
pub struct AeLossVars {
    pub total: Var,
    pub cd: Vec<Var>,
    pub nc: Var,
    pub kl: Var,
}

impl AeLossVars {
    pub fn parts(&self, g: &Graph) -> AeLossParts {
        let v = |x: Var| f64::from(g.value(x).item());
        AeLossParts { total: v(self.total), cd: self.cd.iter().map(|&c| v(c)).collect(), nc: v(self.nc), kl: v(self.kl) }
    }
}

/// Multi-scale Chamfer against FPS-downsampled inputs, normal consistency on the
/// last level and KL on the posterior.
pub fn ae_loss_graph(g: &mut Graph, input: &PointCloud, vars: &AeVars, weights: LossWeights) -> Result<AeLossVars> {
    let levels = &vars.decoded.levels;
    let n_in = input.len();
    let last = levels.len() - 1;
    let mut cd = Vec::with_capacity(levels.len());
    for (i, &lv) in levels.iter().enumerate() {
        let m = g.value(lv).rows();
        let target = if i == last {
            if m != n_in {
                return Err(Error::Contract(format!("final level has {m} points, input has {n_in}")));
            }
            input.positions().to_vec()
        } else {
            if m > n_in {
                return Err(Error::Contract(format!("level {i} has {m} points, more than the {n_in} input points")));
            }
            fps_points(input.positions(), m, FpsStrategy::CentroidSeeded)?
        };
        let t = g.constant(Tensor::from_points(&target));
        cd.push(chamfer_loss(g, lv, t)?);
    }
    let in_pos = g.constant(input.positions_tensor());
    let in_nrm = g.constant(Tensor::from_points(input.require_normals()?));
    let nc = normal_consistency_loss(g, in_pos, in_nrm, levels[last], vars.decoded.normals)?;
    let kl = kl_loss(g, vars.mean, vars.logvar)?;

    let mut total = cd[0];
    for &c in &cd[1..] {
        total = g.add(total, c)?;
    }
    let wnc = g.scale(nc, weights.nc);
    total = g.add(total, wnc)?;
    let wkl = g.scale(kl, weights.kl);
    total = g.add(total, wkl)?;
    Ok(AeLossVars { total, cd, nc, kl })
}

/// Loss of given decoder outputs: `levels` are the positions of every level and
/// `normals` those of the last one.
pub fn ae_loss(
    input: &PointCloud,
    levels: &[Vec<Point>],
    normals: &[Point],
    posterior: &LatentPosterior,
    weights: LossWeights,
) -> Result<AeLossParts> {
    if levels.is_empty() {
        return Err(Error::Contract("no decoder levels".into()));
    }
    let mut g = Graph::inference();
    let level_vars: Vec<Var> = levels.iter().map(|l| g.constant(Tensor::from_points(l))).collect();
    if normals.len() != levels[levels.len() - 1].len() {
        return Err(Error::Contract("normals must match the final level".into()));
    }
    let normals = g.constant(Tensor::from_points(normals));
    let mean = g.constant(posterior.mean.clone());
    let logvar = g.constant(posterior.logvar.clone());
    let vars = AeVars {
        mean,
        logvar,
        decoded: crate::nets::DecodeVars { levels: level_vars, normals },
    };
    Ok(ae_loss_graph(&mut g, input, &vars, weights)?.parts(&g))
}
