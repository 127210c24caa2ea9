//! Latent-point editing: feature regeneration after moving latent points,
//! correspondence, interpolation and combination of shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{partial_resample, sample_features, sample_positions, DdpmKind, LatentDdpm};
use crate::error::{arg, Error, Result};
use crate::geometry::{centroid, dist2, min_cost_assignment, PointCloud};
use crate::nets::{Autoencoder, SparseLatent};

/// Frozen autoencoder plus the two cascaded DDPMs.
#[derive(Clone, Debug)]
pub struct Models {
    pub ae: Autoencoder,
    pub pos: LatentDdpm,
    pub feat: LatentDdpm,
}

impl Models {
    pub fn new(ae: Autoencoder, pos: LatentDdpm, feat: LatentDdpm) -> Result<Self> {
        if pos.kind() != DdpmKind::Position || feat.kind() != DdpmKind::Feature {
            return Err(Error::Config("expected a position DDPM and a feature DDPM".into()));
        }
        if feat.data_dim() != ae.config().latent_dim {
            return Err(Error::Config(format!(
                "feature DDPM models {} channels, autoencoder latent has {}",
                feat.data_dim(),
                ae.config().latent_dim
            )));
        }
        Ok(Self { ae, pos, feat })
    }

    pub fn k(&self) -> usize {
        self.ae.config().latent_points
    }

    pub fn dim(&self) -> usize {
        self.ae.config().latent_dim
    }

    /// Unconditional sample: positions, then features given positions. Pure in `seed`.
    pub fn generate(&self, seed: u64) -> Result<SparseLatent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = sample_positions(&self.pos, self.k(), &mut rng)?;
        let f = sample_features(&self.feat, &x, &mut rng)?;
        SparseLatent::new(x, f.to_rows())
    }

    pub fn decode(&self, latent: &SparseLatent) -> Result<PointCloud> {
        self.check_latent(latent)?;
        Ok(self.ae.decode(latent)?.cloud)
    }

    pub fn check_latent(&self, latent: &SparseLatent) -> Result<()> {
        if latent.k() != self.k() || latent.dim() != self.dim() {
            return Err(arg(format!(
                "latent is {}x{}, models expect {}x{}",
                latent.k(),
                latent.dim(),
                self.k(),
                self.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditMode {
    /// New features for every point.
    ResampleAll,
    /// New features only where `moved_mask` is set; the rest are kept.
    ResampleMoved,
    /// Decode the given latent as is.
    KeepFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub latent: SparseLatent,
    pub moved_mask: Vec<bool>,
    pub mode: EditMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edited {
    pub latent: SparseLatent,
    pub cloud: PointCloud,
}

pub fn edit(req: &EditRequest, models: &Models) -> Result<Edited> {
    let latent = &req.latent;
    models.check_latent(latent)?;
    if req.moved_mask.len() != latent.k() {
        return Err(arg(format!("moved_mask has {} entries for {} latent points", req.moved_mask.len(), latent.k())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let latent = match req.mode {
        EditMode::KeepFeatures => latent.clone(),
        EditMode::ResampleAll => {
            let f = sample_features(&models.feat, &latent.positions, &mut rng)?;
            SparseLatent::new(latent.positions.clone(), f.to_rows())?
        }
        EditMode::ResampleMoved => {
            if req.moved_mask.iter().all(|&m| m) {
                return Err(arg("ResampleMoved needs at least one fixed point"));
            }
            let f = partial_resample(&models.feat, &latent.positions, &latent.features_tensor(), &req.moved_mask, &mut rng)?;
            SparseLatent::new(latent.positions.clone(), f.to_rows())?
        }
    };
    let cloud = models.decode(&latent)?;
    Ok(Edited { latent, cloud })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum CorrespondStrategy {
    /// Squared distance between centroid-aligned positions.
    #[default]
    Positions,
    /// Adds `weight` times the squared feature distance.
    PositionsAndFeatures { weight: f32 },
}

/// Bijection between latent indices: row `i` of `a` corresponds to row `perm[i]` of `b`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub perm: Vec<usize>,
}

impl Correspondence {
    pub fn identity(k: usize) -> Self {
        Self { perm: (0..k).collect() }
    }

    /// `b` reordered so that its row `i` is the partner of row `i` of `a`.
    pub fn apply(&self, b: &SparseLatent) -> Result<SparseLatent> {
        if b.k() != self.perm.len() {
            return Err(arg(format!("correspondence over {} points applied to {}", self.perm.len(), b.k())));
        }
        let positions = self.perm.iter().map(|&j| b.positions[j]).collect();
        let features = self.perm.iter().map(|&j| b.features[j].clone()).collect();
        SparseLatent::new(positions, features)
    }
}

/// Minimum-total-cost bijection from `a` to `b` after aligning the centroids, solved exactly.
pub fn correspond(a: &SparseLatent, b: &SparseLatent, strategy: CorrespondStrategy) -> Result<Correspondence> {
    let k = a.k();
    if b.k() != k {
        return Err(arg(format!("cannot correspond {k} latent points with {}", b.k())));
    }
    let weight = match strategy {
        CorrespondStrategy::Positions => 0.0,
        CorrespondStrategy::PositionsAndFeatures { weight } => {
            if a.dim() != b.dim() {
                return Err(arg("feature dimensions differ"));
            }
            f64::from(weight)
        }
    };
    let (ca, cb) = (centroid(&a.positions), centroid(&b.positions));
    let center = |p: &[f32; 3], c: &[f32; 3]| [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    let mut cost = Vec::with_capacity(k * k);
    for i in 0..k {
        let pa = center(&a.positions[i], &ca);
        for j in 0..k {
            let mut c = f64::from(dist2(&pa, &center(&b.positions[j], &cb)));
            if weight > 0.0 {
                let fd: f64 = a.features[i].iter().zip(&b.features[j]).map(|(x, y)| f64::from(x - y).powi(2)).sum();
                c += weight * fd;
            }
            cost.push(c);
        }
    }
    Ok(Correspondence { perm: min_cost_assignment(&cost, k) })
}

/// `(1 - s) a + s b` row by row over positions and features; rows with `mask[i]` set keep `a`.
/// `b` must already be aligned to `a` (see [`Correspondence::apply`]).
pub fn interpolate(a: &SparseLatent, b: &SparseLatent, s: f32, mask: Option<&[bool]>) -> Result<SparseLatent> {
    if !(0.0..=1.0).contains(&s) {
        return Err(arg(format!("interpolation weight {s} outside [0, 1]")));
    }
    if a.k() != b.k() || a.dim() != b.dim() {
        return Err(arg(format!("cannot interpolate {}x{} with {}x{}", a.k(), a.dim(), b.k(), b.dim())));
    }
    if let Some(m) = mask {
        if m.len() != a.k() {
            return Err(arg(format!("mask has {} entries for {} latent points", m.len(), a.k())));
        }
    }
    let keep = |i: usize| mask.is_some_and(|m| m[i]);
    let lerp = |x: f32, y: f32| (1.0 - s) * x + s * y;
    let positions = (0..a.k())
        .map(|i| if keep(i) { a.positions[i] } else { std::array::from_fn(|c| lerp(a.positions[i][c], b.positions[i][c])) })
        .collect();
    let features = (0..a.k())
        .map(|i| {
            if keep(i) {
                a.features[i].clone()
            } else {
                a.features[i].iter().zip(&b.features[i]).map(|(&x, &y)| lerp(x, y)).collect()
            }
        })
        .collect();
    SparseLatent::new(positions, features)
}

/// Where an output row of [`combine`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSource {
    pub part: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub latent: SparseLatent,
    pub sources: Vec<RowSource>,
}

/// Concatenates the selected rows of every part, in part order and then index order as given.
/// Output slots are therefore disjoint by construction; selecting a source row twice,
/// an out-of-range index, or a total other than `k` is an error.
pub fn combine(parts: &[(&SparseLatent, &[usize])], k: usize) -> Result<Combined> {
    let Some(&(first, _)) = parts.first() else {
        return Err(arg("combine needs at least one part"));
    };
    let mut positions = Vec::with_capacity(k);
    let mut features = Vec::with_capacity(k);
    let mut sources = Vec::with_capacity(k);
    for (p, &(latent, indices)) in parts.iter().enumerate() {
        if latent.dim() != first.dim() {
            return Err(arg(format!("part {p} has feature dimension {}, part 0 has {}", latent.dim(), first.dim())));
        }
        let mut used = vec![false; latent.k()];
        for &i in indices {
            if i >= latent.k() {
                return Err(arg(format!("part {p}: index {i} out of range for {} points", latent.k())));
            }
            if std::mem::replace(&mut used[i], true) {
                return Err(arg(format!("part {p}: row {i} selected twice")));
            }
            positions.push(latent.positions[i]);
            features.push(latent.features[i].clone());
            sources.push(RowSource { part: p, index: i });
        }
    }
    if positions.len() != k {
        return Err(arg(format!("parts select {} rows, need exactly {k}", positions.len())));
    }
    Ok(Combined { latent: SparseLatent::new(positions, features)?, sources })
}
