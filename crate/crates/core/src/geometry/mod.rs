//! Point-cloud kernels: sampling, neighbors, distances and their differentiable forms.

mod assignment;
mod distance;
pub mod losses;
mod neighbors;
mod sampling;

use serde::{Deserialize, Serialize};
use slpgen_autodiff::Tensor;

use crate::error::{arg, Result};

pub use assignment::min_cost_assignment;
pub use distance::{chamfer, emd, nearest, normal_consistency};
pub use neighbors::{knn, knn_flat};
pub use sampling::{fps, fps_indices, fps_points, FpsPick, FpsStrategy};

pub type Point = [f32; 3];

/// Tolerance on normal length.
pub const UNIT_TOLERANCE: f32 = 1e-4;

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f32 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let mut acc = [0f64; 3];
    for p in points {
        for d in 0..3 {
            acc[d] += f64::from(p[d]);
        }
    }
    [(acc[0] / n) as f32, (acc[1] / n) as f32, (acc[2] / n) as f32]
}

/// Positions with optional unit normals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    positions: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normals: Option<Vec<Point>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point>) -> Result<Self> {
        if positions.is_empty() {
            return Err(arg("point cloud needs at least one point"));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(arg("point cloud positions must be finite"));
        }
        Ok(Self { positions, normals: None })
    }

    pub fn with_normals(positions: Vec<Point>, normals: Vec<Point>) -> Result<Self> {
        let mut cloud = Self::new(positions)?;
        if normals.len() != cloud.positions.len() {
            return Err(arg(format!("{} normals for {} points", normals.len(), cloud.positions.len())));
        }
        if let Some(i) = normals.iter().position(|n| (dist2(n, &[0.0; 3]).sqrt() - 1.0).abs() > UNIT_TOLERANCE) {
            return Err(arg(format!("normal {i} is not unit length: {:?}", normals[i])));
        }
        cloud.normals = Some(normals);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn normals(&self) -> Option<&[Point]> {
        self.normals.as_deref()
    }

    pub fn require_normals(&self) -> Result<&[Point]> {
        self.normals().ok_or_else(|| arg("point cloud carries no normals"))
    }

    pub fn positions_tensor(&self) -> Tensor {
        Tensor::from_points(&self.positions)
    }

    /// `[n, 6]` rows of position followed by normal.
    pub fn features_tensor(&self) -> Result<Tensor> {
        let normals = self.require_normals()?;
        let data = self
            .positions
            .iter()
            .zip(normals)
            .flat_map(|(p, n)| p.iter().chain(n.iter()).copied())
            .collect();
        Ok(Tensor::new(vec![self.len(), 6], data)?)
    }

    /// Subset of points (and normals) by index.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let positions = idx.iter().map(|&i| self.positions[i]).collect();
        match &self.normals {
            Some(n) => Self::with_normals(positions, idx.iter().map(|&i| n[i]).collect()),
            None => Self::new(positions),
        }
    }
}

/// Centers the bounding box at the origin and scales the largest absolute
/// coordinate to 1. A cloud with zero extent is only centered.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for p in cloud.positions() {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let center = [0, 1, 2].map(|d| 0.5 * (lo[d] + hi[d]));
    let centered: Vec<Point> = cloud
        .positions()
        .iter()
        .map(|p| [p[0] - center[0], p[1] - center[1], p[2] - center[2]])
        .collect();
    let extent = centered.iter().flatten().fold(0f32, |m, v| m.max(v.abs()));
    let scale = if extent > 0.0 { extent } else { 1.0 };
    let positions = centered.into_iter().map(|p| p.map(|v| v / scale)).collect();
    PointCloud { positions, normals: cloud.normals.clone() }
}
