//! Attention-based point blocks: set abstraction (SA), feature transfer (FT)
//! and the lightweight PointNet++ used on sparse point sets.
//!
//! All three share one aggregation: every group of `K` neighbor rows passes a
//! shared MLP, a score MLP turns each transformed row (optionally prefixed by
//! a query) into a scalar, and a softmax over the group weights the sum.

use rand::Rng;
use serde::{Deserialize, Serialize};
use slpgen_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};

use super::layers::Mlp;
use crate::error::{arg, Result};
use crate::geometry::{fps_indices, knn_flat};

/// `[0, 0, .., 1, 1, .., n-1]`, each index repeated `k` times.
pub fn repeat_each(n: usize, k: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub transform: Mlp,
    pub score: Mlp,
}

/// Output of an attention aggregation and the `[groups, K]` weights that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        widths: &[usize],
        query_dim: usize,
        attention_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let transform = Mlp::new(store, &format!("{name}.mlp"), input, widths, true, rng)?;
        let score = Mlp::new(store, &format!("{name}.score"), query_dim + transform.output(), &[attention_width, 1], false, rng)?;
        Ok(Self { transform, score })
    }

    pub fn output(&self) -> usize {
        self.transform.output()
    }

    pub fn score_params(&self) -> Vec<ParamId> {
        self.score.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// `grouped` holds `groups * k` rows, group-major; `query` (if any) is row-aligned with it.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        grouped: Var,
        groups: usize,
        k: usize,
        query: Option<Var>,
    ) -> Result<Attended> {
        let h = self.transform.forward(g, store, grouped)?;
        let score_in = match query {
            Some(q) => g.concat(&[q, h], 1)?,
            None => h,
        };
        let s = self.score.forward(g, store, score_in)?;
        let s = g.reshape(s, &[groups, k])?;
        let weights = g.softmax(s, 1)?;
        let output = g.group_weighted_sum(h, weights)?;
        Ok(Attended { output, weights })
    }
}

/// Sets every score parameter to zero, which makes all attention weights uniform.
pub fn zero_scores(store: &mut ParamStore, attention: &Attention) {
    for id in attention.score_params() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(shape);
    }
}

/// Rows `p_j - c_i` for neighbor `j` of center `i`, in the same group-major layout as `neighbors`.
fn relative_offsets(g: &mut Graph, positions: Var, centers: Var, neighbors: &[usize], k: usize) -> Result<Var> {
    let groups = neighbors.len() / k;
    let nb = g.gather_rows(positions, neighbors)?;
    let ctr = g.gather_rows(centers, &repeat_each(groups, k))?;
    Ok(g.sub(nb, ctr)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaConfig {
    pub out_points: usize,
    pub k: usize,
    pub mlp_widths: Vec<usize>,
    pub attention_width: usize,
}

/// Set abstraction: FPS centers, K-nearest grouping, attention pooling.
#[derive(Clone, Debug)]
pub struct SaModule {
    pub config: SaConfig,
    pub attention: Attention,
    pub in_features: usize,
}

impl SaModule {
    pub fn new(store: &mut ParamStore, name: &str, config: SaConfig, in_features: usize, rng: &mut impl Rng) -> Result<Self> {
        let attention =
            Attention::new(store, name, in_features + 3, &config.mlp_widths, 0, config.attention_width, rng)?;
        Ok(Self { config, attention, in_features })
    }

    pub fn out_features(&self) -> usize {
        self.attention.output()
    }

    /// Returns center positions `[out_points, 3]`, their features, and the attention weights.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, positions: Var, features: Var) -> Result<(Var, Var, Var)> {
        let pts = g.value(positions).to_points();
        let (m, k) = (self.config.out_points, self.config.k);
        if g.value(features).cols() != self.in_features || g.value(features).rows() != pts.len() {
            return Err(arg(format!(
                "SA expects {} features per point for {} points, got {:?}",
                self.in_features,
                pts.len(),
                g.value(features).shape()
            )));
        }
        if k > pts.len() || m > pts.len() {
            return Err(arg(format!("SA: K = {k}, {m} centers from {} points", pts.len())));
        }
        let center_idx = fps_indices(&pts, m)?;
        let center_pts: Vec<_> = center_idx.iter().map(|&i| pts[i]).collect();
        let neighbors = knn_flat(&center_pts, &pts, k)?;
        let centers = g.gather_rows(positions, &center_idx)?;
        let nb_feat = g.gather_rows(features, &neighbors)?;
        let offsets = relative_offsets(g, positions, centers, &neighbors, k)?;
        let grouped = g.concat(&[nb_feat, offsets], 1)?;
        let att = self.attention.forward(g, store, grouped, m, k, None)?;
        Ok((centers, att.output, att.weights))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtConfig {
    pub k: usize,
    pub mlp_widths: Vec<usize>,
    pub attention_width: usize,
}

/// Feature transfer: every target point attends over its K nearest source points,
/// with the target's own features as the query.
#[derive(Clone, Debug)]
pub struct FtModule {
    pub config: FtConfig,
    pub attention: Attention,
    pub source_features: usize,
    pub query_features: usize,
}

impl FtModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: FtConfig,
        source_features: usize,
        query_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attention = Attention::new(
            store,
            name,
            source_features + 3,
            &config.mlp_widths,
            query_features,
            config.attention_width,
            rng,
        )?;
        Ok(Self { config, attention, source_features, query_features })
    }

    pub fn out_features(&self) -> usize {
        self.attention.output()
    }

    /// Mapped features `[|target|, out]` and the attention weights.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        source_pos: Var,
        source_feat: Var,
        target_pos: Var,
        query: Var,
    ) -> Result<(Var, Var)> {
        let src = g.value(source_pos).to_points();
        let tgt = g.value(target_pos).to_points();
        if src.is_empty() || g.value(source_pos).numel() == 0 {
            return Err(arg("FT: empty source"));
        }
        if g.value(source_feat).cols() != self.source_features || g.value(query).cols() != self.query_features {
            return Err(arg(format!(
                "FT expects {} source and {} query features, got {:?} and {:?}",
                self.source_features,
                self.query_features,
                g.value(source_feat).shape(),
                g.value(query).shape()
            )));
        }
        let k = self.config.k.min(src.len());
        let neighbors = knn_flat(&tgt, &src, k)?;
        let nb_feat = g.gather_rows(source_feat, &neighbors)?;
        let offsets = relative_offsets(g, source_pos, target_pos, &neighbors, k)?;
        let grouped = g.concat(&[nb_feat, offsets], 1)?;
        let q = g.gather_rows(query, &repeat_each(tgt.len(), k))?;
        let att = self.attention.forward(g, store, grouped, tgt.len(), k, Some(q))?;
        Ok((att.output, att.weights))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiniConfig {
    /// Upper bound on the neighborhood size; the effective K is `min(k, n)`.
    pub k: usize,
    pub mlp_widths: Vec<usize>,
    pub attention_width: usize,
}

/// One grouping level over the points themselves plus a global max-pooled descriptor.
/// Output per point: `[local aggregate | global max]`.
#[derive(Clone, Debug)]
pub struct MiniPointNet {
    pub config: MiniConfig,
    pub attention: Attention,
    pub features: usize,
}

impl MiniPointNet {
    pub fn new(store: &mut ParamStore, name: &str, config: MiniConfig, features: usize, rng: &mut impl Rng) -> Result<Self> {
        let attention =
            Attention::new(store, name, 6 + features, &config.mlp_widths, 0, config.attention_width, rng)?;
        Ok(Self { config, attention, features })
    }

    pub fn out_features(&self) -> usize {
        2 * self.attention.output()
    }

    /// Per-neighbor rows `[p_j | f_j | p_j - p_i]` over the `K` nearest points of each point.
    pub fn grouped_input(&self, g: &mut Graph, positions: Var, features: Option<Var>) -> Result<(Var, usize)> {
        let pts = g.value(positions).to_points();
        if pts.len() < 2 {
            return Err(arg(format!("mini PointNet needs at least 2 points, got {}", pts.len())));
        }
        let given = features.map_or(0, |f| g.value(f).cols());
        if given != self.features {
            return Err(arg(format!("mini PointNet expects {} features, got {given}", self.features)));
        }
        let k = self.config.k.min(pts.len());
        let neighbors = knn_flat(&pts, &pts, k)?;
        let abs = g.gather_rows(positions, &neighbors)?;
        let offsets = relative_offsets(g, positions, positions, &neighbors, k)?;
        let grouped = match features {
            Some(f) => {
                let nf = g.gather_rows(f, &neighbors)?;
                g.concat(&[abs, nf, offsets], 1)?
            }
            None => g.concat(&[abs, offsets], 1)?,
        };
        Ok((grouped, k))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, positions: Var, features: Option<Var>) -> Result<Var> {
        let n = g.value(positions).rows();
        let (grouped, k) = self.grouped_input(g, positions, features)?;
        let local = self.attention.forward(g, store, grouped, n, k, None)?.output;
        let global = g.max_rows(local)?;
        let global = g.gather_rows(global, &vec![0; n])?;
        Ok(g.concat(&[local, global], 1)?)
    }
}
