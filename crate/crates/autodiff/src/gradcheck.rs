//! Central finite-difference oracle for checking analytic gradients.
//!
//! The oracle only ever calls the forward closure, so it shares no code with
//! the backward pass it checks.

use crate::tensor::Tensor;

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f32>,
    pub numeric: Vec<f32>,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`.
    pub rel_error: f32,
}

/// Numeric gradient of `f` at `x` by central differences with step `h`,
/// evaluated only at the listed coordinates (all when `coords` is `None`).
pub fn numeric_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f32, coords: Option<&[usize]>) -> Vec<f32> {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            // The f32 rounding of orig +- h is the step actually taken.
            let (hi, lo) = (orig + h, orig - h);
            probe.data_mut()[i] = hi;
            let up = f(&probe);
            probe.data_mut()[i] = lo;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            ((up - down) / (f64::from(hi) - f64::from(lo))) as f32
        })
        .collect()
}

/// Compares `analytic` (already restricted to `coords`) with the numeric oracle.
pub fn compare(analytic: Vec<f32>, numeric: Vec<f32>, floor: f32) -> GradCheck {
    let norm = |v: &[f32]| v.iter().map(|&a| f64::from(a) * f64::from(a)).sum::<f64>().sqrt();
    let diff: Vec<f32> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let denom = norm(&analytic).max(norm(&numeric)).max(f64::from(floor));
    let rel_error = (norm(&diff) / denom) as f32;
    GradCheck { analytic, numeric, rel_error }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_a_cubic() {
        let x = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut f = |t: &Tensor| t.data().iter().map(|&v| f64::from(v).powi(3)).sum::<f64>();
        let n = numeric_grad(&mut f, &x, 1e-2, None);
        assert!((n[0] - 3.0).abs() < 1e-2);
        assert!((n[1] - 12.0).abs() < 1e-2);
        let check = compare(vec![3.0, 12.0], n, 1e-6);
        assert!(check.rel_error < 1e-3);
    }
}

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::graph::{Graph, Var};

/// Gradient norms below this are judged on absolute error: with f32 forward
/// passes and a `1e-3` step the central difference carries ~`1e-5` of noise.
pub const NORM_FLOOR: f32 = 5e-2;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Worst finite-difference disagreement for one op over many random instances.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f32,
}

fn uniform(rng: &mut StdRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn dim(rng: &mut StdRng) -> usize {
    rng.random_range(1..=5)
}

/// Random `[dim, dim + extra_cols]` matrix.
fn rand_mat(rng: &mut StdRng, extra_cols: usize, lo: f32, hi: f32) -> Tensor {
    let shape = [dim(rng), dim(rng) + extra_cols];
    uniform(rng, &shape, lo, hi)
}

fn evaluate(inputs: &[Tensor], build: &Build, weights: &Tensor) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    g.value(out).data().iter().zip(weights.data()).map(|(&o, &w)| f64::from(o) * f64::from(w)).sum()
}

/// Checks one instance: the loss is a fixed random projection of the op output.
fn check_instance(rng: &mut StdRng, inputs: Vec<Tensor>, build: &Build, h: f32) -> f32 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let weights = uniform(rng, g.value(out).shape(), -1.0, 1.0);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).expect("same shape");
    let loss = g.sum(prod);
    let grads = g.backward(loss).expect("backward");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (j, &v) in vars.iter().enumerate() {
        match grads.get(v) {
            Some(t) => analytic.extend_from_slice(t.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, inputs[j].numel())),
        }
        let mut f = |probe: &Tensor| {
            let mut xs = inputs.clone();
            xs[j] = probe.clone();
            evaluate(&xs, build, &weights)
        };
        numeric.extend(numeric_grad(&mut f, &inputs[j], h, None));
    }
    compare(analytic, numeric, NORM_FLOOR).rel_error
}

fn cases() -> Vec<(&'static str, Box<dyn Fn(&mut StdRng) -> (Vec<Tensor>, Build)>)> {
    fn case<F>(f: F) -> Box<dyn Fn(&mut StdRng) -> (Vec<Tensor>, Build)>
    where
        F: Fn(&mut StdRng) -> (Vec<Tensor>, Build) + 'static,
    {
        Box::new(f)
    }
    vec![
        ("matmul", case(|r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            (vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0)], Box::new(|g, v| g.matmul(v[0], v[1])))
        })),
        ("add", case(|r| {
            let s = [dim(r), dim(r)];
            (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], Box::new(|g, v| g.add(v[0], v[1])))
        })),
        ("sub", case(|r| {
            let s = [dim(r), dim(r)];
            (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], Box::new(|g, v| g.sub(v[0], v[1])))
        })),
        ("mul", case(|r| {
            let s = [dim(r), dim(r)];
            (vec![uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0)], Box::new(|g, v| g.mul(v[0], v[1])))
        })),
        ("scale", case(|r| {
            let s: f32 = r.random_range(-2.0..2.0);
            (vec![rand_mat(r, 0, -1.0, 1.0)], Box::new(move |g, v| Ok(g.scale(v[0], s))))
        })),
        ("add_scalar", case(|r| {
            let s: f32 = r.random_range(-2.0..2.0);
            (vec![rand_mat(r, 0, -1.0, 1.0)], Box::new(move |g, v| Ok(g.add_scalar(v[0], s))))
        })),
        ("add_bias", case(|r| {
            let (m, n) = (dim(r), dim(r));
            (vec![uniform(r, &[m, n], -1.0, 1.0), uniform(r, &[n], -1.0, 1.0)], Box::new(|g, v| g.add_bias(v[0], v[1])))
        })),
        ("leaky_relu", case(|r| {
            (vec![{ let s = [dim(r), dim(r)]; away_from_zero(r, &s) }], Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.2))))
        })),
        ("exp", case(|r| (vec![rand_mat(r, 0, -1.0, 1.0)], Box::new(|g, v| Ok(g.exp(v[0])))))),
        ("tanh", case(|r| (vec![rand_mat(r, 0, -2.0, 2.0)], Box::new(|g, v| Ok(g.tanh(v[0])))))),
        ("sum", case(|r| (vec![rand_mat(r, 0, -1.0, 1.0)], Box::new(|g, v| Ok(g.sum(v[0])))))),
        ("mean", case(|r| (vec![rand_mat(r, 0, -1.0, 1.0)], Box::new(|g, v| Ok(g.mean(v[0])))))),
        ("softmax", case(|r| {
            let axis = r.random_range(0..2);
            let s = [dim(r) + 1, dim(r) + 1];
            (vec![uniform(r, &s, -2.0, 2.0)], Box::new(move |g, v| g.softmax(v[0], axis)))
        })),
        ("concat", case(|r| {
            let axis = r.random_range(0..2);
            let (a, b, c) = (dim(r), dim(r), dim(r));
            let (s1, s2) = if axis == 0 { ([a, c], [b, c]) } else { ([a, b], [a, c]) };
            (vec![uniform(r, &s1, -1.0, 1.0), uniform(r, &s2, -1.0, 1.0)], Box::new(move |g, v| g.concat(&[v[0], v[1]], axis)))
        })),
        ("narrow_cols", case(|r| {
            let c = dim(r) + 1;
            let start = r.random_range(0..c);
            let len = r.random_range(1..=c - start);
            ({ let s = [dim(r), c]; vec![uniform(r, &s, -1.0, 1.0)] }, Box::new(move |g, v| g.narrow_cols(v[0], start, len)))
        })),
        ("gather_rows", case(|r| {
            let rows = dim(r);
            let idx: Vec<usize> = (0..dim(r) + 2).map(|_| r.random_range(0..rows)).collect();
            ({ let s = [rows, dim(r)]; vec![uniform(r, &s, -1.0, 1.0)] }, Box::new(move |g, v| g.gather_rows(v[0], &idx)))
        })),
        ("reshape", case(|r| {
            let (a, b) = (dim(r), dim(r));
            (vec![uniform(r, &[a, b], -1.0, 1.0)], Box::new(move |g, v| g.reshape(v[0], &[b, a])))
        })),
        ("group_weighted_sum", case(|r| {
            let (m, k, c) = (dim(r), dim(r), dim(r));
            (
                vec![uniform(r, &[m * k, c], -1.0, 1.0), uniform(r, &[m, k], 0.0, 1.0)],
                Box::new(|g, v| g.group_weighted_sum(v[0], v[1])),
            )
        })),
        ("max_rows", case(|r| {
            let (n, c) = (dim(r), dim(r));
            // Distinct values at least 0.1 apart keep the argmax stable under the probe step.
            let mut vals: Vec<f32> = (0..n * c).map(|i| i as f32 * 0.1).collect();
            for i in (1..vals.len()).rev() {
                vals.swap(i, r.random_range(0..=i));
            }
            (vec![Tensor::new(vec![n, c], vals).expect("shape")], Box::new(|g, v| g.max_rows(v[0])))
        })),
        ("normalize_rows", case(|r| {
            let (n, c) = (dim(r), dim(r) + 1);
            let mut t = uniform(r, &[n, c], -1.0, 1.0);
            t.data_mut()[0] += 1.5;
            for row in 0..n {
                t.data_mut()[row * c] = 0.5 + t.data()[row * c].abs();
            }
            (vec![t], Box::new(|g, v| g.normalize_rows(v[0])))
        })),
        ("sinusoidal", case(|r| {
            ({ let s = [dim(r), 1]; vec![uniform(r, &s, 0.0, 5.0)] }, Box::new(|g, v| g.sinusoidal(v[0], 6, 100.0)))
        })),
        ("mlp3", case(|r| {
            let (n, i, h, o) = (dim(r), 3, 8, 2);
            let inputs = vec![
                uniform(r, &[n, i], -1.0, 1.0),
                uniform(r, &[i, h], -0.8, 0.8),
                uniform(r, &[h], -0.1, 0.1),
                uniform(r, &[h, h], -0.5, 0.5),
                uniform(r, &[h], -0.1, 0.1),
                uniform(r, &[h, o], -0.5, 0.5),
                uniform(r, &[o], -0.1, 0.1),
            ];
            (inputs, Box::new(|g, v| {
                let mut x = v[0];
                for layer in 0..3 {
                    x = g.matmul(x, v[1 + 2 * layer])?;
                    x = g.add_bias(x, v[2 + 2 * layer])?;
                    if layer < 2 {
                        x = g.tanh(x);
                    }
                }
                Ok(x)
            }))
        })),
    ]
}

/// Runs every built-in op through `instances` random finite-difference checks (step `1e-3`).
pub fn op_suite(seed: u64, instances: usize) -> Vec<OpReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|(name, make)| {
            let max_rel_error = (0..instances)
                .map(|_| {
                    let (inputs, build) = make(&mut rng);
                    check_instance(&mut rng, inputs, &build, 1e-3)
                })
                .fold(0.0f32, f32::max);
            OpReport { name, instances, max_rel_error }
        })
        .collect()
}
