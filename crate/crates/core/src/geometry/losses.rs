//! Chamfer and normal-consistency losses as differentiable graph ops.
//!
//! Nearest-neighbor assignments are piecewise constant, so gradients flow
//! through the matched coordinates (Chamfer) and matched normals (normal
//! consistency) only.

use slpgen_autodiff::{CustomOp, Graph, Tensor, Var};

use super::{nearest, Point};
use crate::error::{arg, Result};

struct ChamferOp {
    nn_ab: Vec<usize>,
    nn_ba: Vec<usize>,
}

impl CustomOp for ChamferOp {
    fn name(&self) -> &'static str {
        "chamfer"
    }

    fn discrete_state(&self) -> Vec<usize> {
        [&self.nn_ab[..], &self.nn_ba[..]].concat()
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (n, m) = (a.rows(), b.rows());
        let g = grad.item();
        let mut ga = vec![0.0f32; n * 3];
        let mut gb = vec![0.0f32; m * 3];
        let (ad, bd) = (a.data(), b.data());
        let wa = 2.0 * g / n as f32;
        for (i, &j) in self.nn_ab.iter().enumerate() {
            for d in 0..3 {
                let diff = wa * (ad[i * 3 + d] - bd[j * 3 + d]);
                ga[i * 3 + d] += diff;
                gb[j * 3 + d] -= diff;
            }
        }
        let wb = 2.0 * g / m as f32;
        for (j, &i) in self.nn_ba.iter().enumerate() {
            for d in 0..3 {
                let diff = wb * (bd[j * 3 + d] - ad[i * 3 + d]);
                gb[j * 3 + d] += diff;
                ga[i * 3 + d] -= diff;
            }
        }
        vec![
            Some(Tensor::new(vec![n, 3], ga).expect("shape")),
            Some(Tensor::new(vec![m, 3], gb).expect("shape")),
        ]
    }
}

fn points_of(g: &Graph, v: Var, what: &str) -> Result<Vec<Point>> {
    let t = g.value(v);
    if t.shape().len() != 2 || t.cols() != 3 {
        return Err(arg(format!("{what}: expected [n, 3], got {:?}", t.shape())));
    }
    Ok(t.to_points())
}

/// Squared-distance Chamfer loss between two `[n, 3]` position tensors.
pub fn chamfer_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (pa, pb) = (points_of(g, a, "chamfer")?, points_of(g, b, "chamfer")?);
    let (nn_ab, dab) = nearest(&pa, &pb);
    let (nn_ba, dba) = nearest(&pb, &pa);
    let mean = |v: &[f32]| v.iter().map(|&x| f64::from(x)).sum::<f64>() / v.len() as f64;
    let value = (mean(&dab) + mean(&dba)) as f32;
    Ok(g.custom(&[a, b], Tensor::scalar(value), Box::new(ChamferOp { nn_ab, nn_ba })))
}

struct NormalConsistencyOp {
    nn_ab: Vec<usize>,
    nn_ba: Vec<usize>,
    /// Orientation of each matched pair, `a -> b` then `b -> a`.
    flips: Vec<bool>,
}

fn dot3(x: &[f32], i: usize, y: &[f32], j: usize) -> f32 {
    (0..3).map(|d| x[i * 3 + d] * y[j * 3 + d]).sum()
}

impl CustomOp for NormalConsistencyOp {
    fn name(&self) -> &'static str {
        "normal_consistency"
    }

    fn discrete_state(&self) -> Vec<usize> {
        let flips = self.flips.iter().map(|&f| usize::from(f));
        self.nn_ab.iter().chain(&self.nn_ba).copied().chain(flips).collect()
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (na, nb) = (inputs[1].data(), inputs[3].data());
        let (n, m) = (inputs[1].rows(), inputs[3].rows());
        let g = grad.item();
        let mut ga = vec![0.0f32; n * 3];
        let mut gb = vec![0.0f32; m * 3];
        let wa = -0.5 * g / n as f32;
        for (i, &j) in self.nn_ab.iter().enumerate() {
            let s = dot3(na, i, nb, j).signum();
            for d in 0..3 {
                ga[i * 3 + d] += wa * s * nb[j * 3 + d];
                gb[j * 3 + d] += wa * s * na[i * 3 + d];
            }
        }
        let wb = -0.5 * g / m as f32;
        for (j, &i) in self.nn_ba.iter().enumerate() {
            let s = dot3(nb, j, na, i).signum();
            for d in 0..3 {
                gb[j * 3 + d] += wb * s * na[i * 3 + d];
                ga[i * 3 + d] += wb * s * nb[j * 3 + d];
            }
        }
        vec![
            None,
            Some(Tensor::new(vec![n, 3], ga).expect("shape")),
            None,
            Some(Tensor::new(vec![m, 3], gb).expect("shape")),
        ]
    }
}

/// Normal-consistency loss; neighbors are matched by position, normals carry the gradient.
pub fn normal_consistency_loss(g: &mut Graph, pos_a: Var, normals_a: Var, pos_b: Var, normals_b: Var) -> Result<Var> {
    let (pa, pb) = (points_of(g, pos_a, "nc")?, points_of(g, pos_b, "nc")?);
    let (na, nb) = (g.value(normals_a).data(), g.value(normals_b).data());
    if na.len() != pa.len() * 3 || nb.len() != pb.len() * 3 {
        return Err(arg("normal consistency: normals must match positions"));
    }
    let (nn_ab, _) = nearest(&pa, &pb);
    let (nn_ba, _) = nearest(&pb, &pa);
    let ab: f64 = nn_ab.iter().enumerate().map(|(i, &j)| f64::from(dot3(na, i, nb, j).abs())).sum::<f64>() / pa.len() as f64;
    let ba: f64 = nn_ba.iter().enumerate().map(|(j, &i)| f64::from(dot3(nb, j, na, i).abs())).sum::<f64>() / pb.len() as f64;
    let value = (1.0 - 0.5 * (ab + ba)) as f32;
    let flips = (nn_ab.iter().enumerate().map(|(i, &j)| dot3(na, i, nb, j) < 0.0))
        .chain(nn_ba.iter().enumerate().map(|(j, &i)| dot3(nb, j, na, i) < 0.0))
        .collect();
    Ok(g.custom(
        &[pos_a, normals_a, pos_b, normals_b],
        Tensor::scalar(value),
        Box::new(NormalConsistencyOp { nn_ab, nn_ba, flips }),
    ))
}
