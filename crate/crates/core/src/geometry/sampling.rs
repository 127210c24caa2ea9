//! Farthest point sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{centroid, dist2, Point};
use crate::error::{arg, Result};

/// How the greedy farthest-point chain is started.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FpsStrategy {
    /// Emits the centroid itself as element 0, then data points.
    CentroidStart,
    /// Uses the centroid only as the initial reference; every emitted element is a data point.
    CentroidSeeded,
    /// Emits a seeded uniformly random data point first.
    RandomStart(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsPick {
    Centroid,
    Index(usize),
}

/// Greedy max-min sampling of `k` elements. Ties go to the lowest input index.
pub fn fps(points: &[Point], k: usize, strategy: FpsStrategy) -> Result<Vec<FpsPick>> {
    let n = points.len();
    let emits_centroid = strategy == FpsStrategy::CentroidStart;
    let data_picks = if emits_centroid { k.saturating_sub(1) } else { k };
    if k == 0 || n == 0 || data_picks > n {
        return Err(arg(format!("fps: cannot pick {k} elements from {n} points with {strategy:?}")));
    }

    let mut selected = vec![false; n];
    let mut out = Vec::with_capacity(k);
    let mut min_d: Vec<f32>;
    match strategy {
        FpsStrategy::CentroidStart | FpsStrategy::CentroidSeeded => {
            let c = centroid(points);
            min_d = points.iter().map(|p| dist2(p, &c)).collect();
            if emits_centroid {
                out.push(FpsPick::Centroid);
            }
        }
        FpsStrategy::RandomStart(seed) => {
            let first = ChaCha8Rng::seed_from_u64(seed).random_range(0..n);
            selected[first] = true;
            out.push(FpsPick::Index(first));
            min_d = points.iter().map(|p| dist2(p, &points[first])).collect();
        }
    }
    while out.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f32::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !selected[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        selected[best] = true;
        out.push(FpsPick::Index(best));
        let chosen = points[best];
        for (m, p) in min_d.iter_mut().zip(points) {
            *m = m.min(dist2(p, &chosen));
        }
    }
    Ok(out)
}

/// Sampled positions, resolving the virtual centroid where present.
pub fn fps_points(points: &[Point], k: usize, strategy: FpsStrategy) -> Result<Vec<Point>> {
    let c = centroid(points);
    Ok(fps(points, k, strategy)?
        .into_iter()
        .map(|p| match p {
            FpsPick::Centroid => c,
            FpsPick::Index(i) => points[i],
        })
        .collect())
}

/// Data-point indices chosen by centroid-seeded sampling (deterministic, order independent).
pub fn fps_indices(points: &[Point], k: usize) -> Result<Vec<usize>> {
    Ok(fps(points, k, FpsStrategy::CentroidSeeded)?
        .into_iter()
        .map(|p| match p {
            FpsPick::Index(i) => i,
            FpsPick::Centroid => unreachable!("centroid-seeded sampling never emits the centroid"),
        })
        .collect())
}
