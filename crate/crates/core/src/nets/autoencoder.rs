use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use slpgen_autodiff::{Graph, ParamStore, Tensor, Var};

use super::blocks::{repeat_each, FtModule, MiniPointNet, SaModule};
use super::config::AeConfig;
use super::layers::Mlp;
use crate::error::{arg, Result};
use crate::geometry::{fps_indices, fps_points, FpsStrategy, Point, PointCloud};

/// `k` latent positions with a `d`-dimensional feature per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseLatent {
    pub positions: Vec<Point>,
    pub features: Vec<Vec<f32>>,
}

impl SparseLatent {
    pub fn new(positions: Vec<Point>, features: Vec<Vec<f32>>) -> Result<Self> {
        if positions.len() < 2 || positions.len() != features.len() {
            return Err(arg(format!("latent has {} positions and {} feature rows", positions.len(), features.len())));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(arg("latent feature rows must share a positive dimension"));
        }
        if positions.iter().flatten().chain(features.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(arg("latent values must be finite"));
        }
        Ok(Self { positions, features })
    }

    pub fn from_tensors(positions: &Tensor, features: &Tensor) -> Result<Self> {
        Self::new(positions.to_points(), features.to_rows())
    }

    pub fn k(&self) -> usize {
        self.positions.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn positions_tensor(&self) -> Tensor {
        Tensor::from_points(&self.positions)
    }

    pub fn features_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.features).expect("validated rows")
    }
}

/// Diagonal Gaussian over latent features.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl LatentPosterior {
    /// `mean + exp(logvar / 2) * eps`.
    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        if eps.shape() != self.mean.shape() {
            return Err(arg(format!("noise shape {:?} vs posterior {:?}", eps.shape(), self.mean.shape())));
        }
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.logvar.data())
            .zip(eps.data())
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Ok(Tensor::new(self.mean.shape().to_vec(), data)?)
    }
}

/// Mean over all entries of `(mu^2 + sigma^2 - log sigma^2 - 1) / 2`.
pub fn kl_divergence(post: &LatentPosterior) -> f64 {
    let n = post.mean.numel() as f64;
    post.mean
        .data()
        .iter()
        .zip(post.logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (f64::from(m), f64::from(lv));
            0.5 * (m * m + lv.exp() - lv - 1.0)
        })
        .sum::<f64>()
        / n
}

/// Differentiable form of [`kl_divergence`].
pub fn kl_loss(g: &mut Graph, mean: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mean);
    let var = g.exp(logvar);
    let a = g.add(m2, var)?;
    let b = g.sub(a, logvar)?;
    let c = g.add_scalar(b, -1.0);
    let mean_all = g.mean(c);
    Ok(g.scale(mean_all, 0.5))
}

/// Latent positions drawn from a cloud by farthest point sampling.
pub fn latent_positions(cloud: &PointCloud, k: usize, strategy: FpsStrategy) -> Result<Vec<Point>> {
    fps_points(cloud.positions(), k, strategy)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub sa: Vec<SaModule>,
    pub mini: MiniPointNet,
    pub ft: FtModule,
    pub head: Mlp,
}

/// One point-upsampling level plus, between levels, the feature extractor for the next.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub pu: Mlp,
    pub next: Option<(MiniPointNet, FtModule)>,
}

/// Graph handles of a decoder pass.
#[derive(Clone, Debug)]
pub struct DecodeVars {
    /// Positions after every level; the last one is the output cloud.
    pub levels: Vec<Var>,
    /// Unit normals of the last level.
    pub normals: Var,
}

/// Graph handles of a full autoencoder pass.
#[derive(Clone, Debug)]
pub struct AeVars {
    pub mean: Var,
    pub logvar: Var,
    pub decoded: DecodeVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Positions of every decoder level.
    pub levels: Vec<Vec<Point>>,
    /// Final level with normals.
    pub cloud: PointCloud,
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    config: AeConfig,
    store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Vec<DecoderLevel>,
}

impl Autoencoder {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;

        let mut sa = Vec::with_capacity(config.sa.len());
        let mut feat = 6;
        for (i, c) in config.sa.iter().enumerate() {
            let m = SaModule::new(s, &format!("enc.sa{i}"), c.clone(), feat, &mut rng)?;
            feat = m.out_features();
            sa.push(m);
        }
        let mini = MiniPointNet::new(s, "enc.mini", config.mini.clone(), 0, &mut rng)?;
        let ft = FtModule::new(s, "enc.ft", config.ft.clone(), feat, mini.out_features(), &mut rng)?;
        let d = config.latent_dim;
        let mut head_widths = config.head_widths.clone();
        head_widths.push(2 * d);
        let head = Mlp::new(s, "enc.head", mini.out_features() + ft.out_features(), &head_widths, false, &mut rng)?;
        let bias = head.layers.last().expect("head layers").bias;
        for v in &mut s.get_mut(bias).data_mut()[d..] {
            *v = config.logvar_init;
        }
        let encoder = Encoder { sa, mini, ft, head };

        let mut decoder = Vec::with_capacity(config.levels.len());
        let mut feat = d;
        for (i, l) in config.levels.iter().enumerate() {
            let last = i + 1 == config.levels.len();
            let mut widths = l.mlp_widths.clone();
            widths.push(if last { 6 * l.gamma } else { 3 * l.gamma });
            let pu = Mlp::new(s, &format!("dec.pu{i}"), feat + 3, &widths, false, &mut rng)?;
            let next = if last {
                None
            } else {
                let mini = MiniPointNet::new(s, &format!("dec.mini{i}"), config.mini.clone(), 0, &mut rng)?;
                let ft = FtModule::new(s, &format!("dec.ft{i}"), config.ft.clone(), feat, mini.out_features(), &mut rng)?;
                feat = mini.out_features() + ft.out_features();
                Some((mini, ft))
            };
            decoder.push(DecoderLevel { pu, next });
        }
        Ok(Self { config, store, encoder, decoder })
    }

    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_latent_positions(&self, positions: &[Point]) -> Result<()> {
        if positions.len() != self.config.latent_points {
            return Err(arg(format!("expected {} latent points, got {}", self.config.latent_points, positions.len())));
        }
        Ok(())
    }

    /// Posterior mean and log-variance handles, `[k, d]` each.
    pub fn encode_graph(&self, g: &mut Graph, cloud: &PointCloud, latent: &[Point]) -> Result<(Var, Var)> {
        self.check_latent_positions(latent)?;
        if cloud.len() != self.config.points {
            return Err(arg(format!("encoder expects {} points, got {}", self.config.points, cloud.len())));
        }
        let s = &self.store;
        let enc = &self.encoder;
        let mut pos = g.constant(cloud.positions_tensor());
        let mut feat = g.constant(cloud.features_tensor()?);
        for sa in &enc.sa {
            let (p, f, _) = sa.forward(g, s, pos, feat)?;
            pos = p;
            feat = f;
        }
        let lat = g.constant(Tensor::from_points(latent));
        let query = enc.mini.forward(g, s, lat, None)?;
        let (mapped, _) = enc.ft.forward(g, s, pos, feat, lat, query)?;
        let h = g.concat(&[query, mapped], 1)?;
        let out = enc.head.forward(g, s, h)?;
        let d = self.config.latent_dim;
        Ok((g.narrow_cols(out, 0, d)?, g.narrow_cols(out, d, d)?))
    }

    pub fn decode_graph(&self, g: &mut Graph, positions: Var, features: Var) -> Result<DecodeVars> {
        let (k, d) = (g.value(positions).rows(), g.value(features).cols());
        if k != self.config.latent_points || d != self.config.latent_dim || g.value(features).rows() != k {
            return Err(arg(format!(
                "decoder expects a {}x{} latent, got {:?} positions and {:?} features",
                self.config.latent_points,
                self.config.latent_dim,
                g.value(positions).shape(),
                g.value(features).shape()
            )));
        }
        let s = &self.store;
        let (mut pos, mut feat) = (positions, features);
        let mut levels = Vec::with_capacity(self.decoder.len());
        let mut normals = None;
        for (level, cfg) in self.decoder.iter().zip(&self.config.levels) {
            let n = g.value(pos).rows();
            let gamma = cfg.gamma;
            let inp = g.concat(&[feat, pos], 1)?;
            let out = level.pu.forward(g, s, inp)?;
            let disp = g.narrow_cols(out, 0, 3 * gamma)?;
            let disp = g.reshape(disp, &[n * gamma, 3])?;
            let disp = g.scale(disp, cfg.displacement_scale);
            let parents = g.gather_rows(pos, &repeat_each(n, gamma))?;
            let up = g.add(parents, disp)?;
            let keep = fps_indices(&g.value(up).to_points(), n * gamma / 2)?;
            let next_pos = g.gather_rows(up, &keep)?;
            match &level.next {
                Some((mini, ft)) => {
                    let local = mini.forward(g, s, next_pos, None)?;
                    let (mapped, _) = ft.forward(g, s, pos, feat, next_pos, local)?;
                    feat = g.concat(&[local, mapped], 1)?;
                }
                None => {
                    let raw = g.narrow_cols(out, 3 * gamma, 3 * gamma)?;
                    let raw = g.reshape(raw, &[n * gamma, 3])?;
                    let kept = g.gather_rows(raw, &keep)?;
                    normals = Some(g.normalize_rows(kept)?);
                }
            }
            pos = next_pos;
            levels.push(pos);
        }
        Ok(DecodeVars { levels, normals: normals.expect("last level predicts normals") })
    }

    /// Encoder, optional reparameterized sample with noise `eps`, and decoder in one graph.
    /// Without `eps` the posterior mean is decoded.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        cloud: &PointCloud,
        latent: &[Point],
        eps: Option<&Tensor>,
    ) -> Result<AeVars> {
        let (mean, logvar) = self.encode_graph(g, cloud, latent)?;
        let z = match eps {
            Some(e) => {
                let e = g.constant(e.clone());
                let half = g.scale(logvar, 0.5);
                let std = g.exp(half);
                let noise = g.mul(std, e)?;
                g.add(mean, noise)?
            }
            None => mean,
        };
        let pos = g.constant(Tensor::from_points(latent));
        let decoded = self.decode_graph(g, pos, z)?;
        Ok(AeVars { mean, logvar, decoded })
    }

    pub fn encode(&self, cloud: &PointCloud, latent: &[Point]) -> Result<LatentPosterior> {
        let mut g = Graph::inference();
        let (m, lv) = self.encode_graph(&mut g, cloud, latent)?;
        Ok(LatentPosterior { mean: g.value(m).clone(), logvar: g.value(lv).clone() })
    }

    pub fn decode(&self, latent: &SparseLatent) -> Result<Decoded> {
        let mut g = Graph::inference();
        let pos = g.constant(latent.positions_tensor());
        let feat = g.constant(latent.features_tensor());
        let out = self.decode_graph(&mut g, pos, feat)?;
        let levels: Vec<Vec<Point>> = out.levels.iter().map(|&v| g.value(v).to_points()).collect();
        let cloud = PointCloud::with_normals(levels.last().expect("levels").clone(), g.value(out.normals).to_points())?;
        Ok(Decoded { levels, cloud })
    }

    /// Sparse latent of a cloud: FPS positions with the posterior mean as features.
    pub fn embed(&self, cloud: &PointCloud, strategy: FpsStrategy) -> Result<SparseLatent> {
        let positions = latent_positions(cloud, self.config.latent_points, strategy)?;
        let post = self.encode(cloud, &positions)?;
        SparseLatent::new(positions, post.mean.to_rows())
    }

    /// Encode with centroid-start latent points, then decode the posterior mean.
    pub fn reconstruct(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let latent = self.embed(cloud, FpsStrategy::CentroidStart)?;
        Ok(self.decode(&latent)?.cloud)
    }
}
