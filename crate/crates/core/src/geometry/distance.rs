//! Set distances between point clouds. Chamfer and EMD use squared Euclidean
//! distance averaged per point; Chamfer sums the two directed means.

use super::{dist2, min_cost_assignment, Point, PointCloud};
use crate::error::{arg, Result};

/// For each point of `a`, the index of its nearest point in `b` (lowest index on ties) and the squared distance.
pub fn nearest(a: &[Point], b: &[Point]) -> (Vec<usize>, Vec<f32>) {
    let mut idx = Vec::with_capacity(a.len());
    let mut d = Vec::with_capacity(a.len());
    for p in a {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for (j, q) in b.iter().enumerate() {
            let dd = dist2(p, q);
            if dd < best_d {
                best_d = dd;
                best = j;
            }
        }
        idx.push(best);
        d.push(best_d);
    }
    (idx, d)
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64
}

pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let (_, dab) = nearest(a.positions(), b.positions());
    let (_, dba) = nearest(b.positions(), a.positions());
    mean(&dab) + mean(&dba)
}

/// Mean squared distance under the optimal bijection.
pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let n = a.len();
    if n != b.len() {
        return Err(arg(format!("emd needs equal sizes, got {} and {}", n, b.len())));
    }
    let cost: Vec<f64> = a
        .positions()
        .iter()
        .flat_map(|p| b.positions().iter().map(move |q| f64::from(dist2(p, q))))
        .collect();
    let assign = min_cost_assignment(&cost, n);
    Ok(assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

/// `1 - (mean |n_x . n_nn(x)| over a->b + the same over b->a) / 2`, neighbors by position.
pub fn normal_consistency(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let (na, nb) = (a.require_normals()?, b.require_normals()?);
    let directed = |src: &[Point], sn: &[Point], dst: &[Point], dn: &[Point]| {
        let (idx, _) = nearest(src, dst);
        idx.iter()
            .enumerate()
            .map(|(i, &j)| {
                let dot: f32 = (0..3).map(|d| sn[i][d] * dn[j][d]).sum();
                f64::from(dot.abs())
            })
            .sum::<f64>()
            / src.len() as f64
    };
    let ab = directed(a.positions(), na, b.positions(), nb);
    let ba = directed(b.positions(), nb, a.positions(), na);
    Ok((1.0 - 0.5 * (ab + ba)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[Point]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn chamfer_hand_case() {
        // a->b: (0 + 1)/2 = 0.5, b->a: 0
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[0.0, 0.0, 0.0]]);
        assert!((chamfer(&a, &b) - 0.5).abs() < 1e-12);
        assert_eq!(chamfer(&a, &b), chamfer(&b, &a));
        assert_eq!(chamfer(&a, &a), 0.0);
    }

    #[test]
    fn emd_line_example() {
        // bijections: {0->0.1, 1->0.9} costs 0.01 + 0.01; the swap costs 0.81 + 0.81
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[0.1, 0.0, 0.0], [0.9, 0.0, 0.0]]);
        assert!((emd(&a, &b).unwrap() - 0.01).abs() < 1e-6);
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
        assert!(emd(&a, &cloud(&[[0.0; 3]])).is_err());
    }

    #[test]
    fn normal_consistency_cases() {
        let pos = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let up = vec![[0.0, 0.0, 1.0]; 3];
        let side = vec![[1.0, 0.0, 0.0]; 3];
        let down = vec![[0.0, 0.0, -1.0]; 3];
        let a = PointCloud::with_normals(pos.clone(), up).unwrap();
        let b = PointCloud::with_normals(pos.clone(), side).unwrap();
        let c = PointCloud::with_normals(pos.clone(), down).unwrap();
        assert_eq!(normal_consistency(&a, &a).unwrap(), 0.0);
        assert_eq!(normal_consistency(&a, &b).unwrap(), 1.0);
        assert_eq!(normal_consistency(&a, &c).unwrap(), 0.0);
        assert!(normal_consistency(&a, &cloud(&pos)).is_err());
    }
}
