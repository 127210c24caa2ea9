//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] walks it in reverse. A graph can
//! be differentiated exactly once; a second call is an error.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::fmt;

use crate::error::{AutodiffError, Result};
use crate::gemm::gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation whose forward value is computed by the caller.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, `None` where the input receives none.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;

    /// Discrete choices made in the forward pass (matchings, branch signs), if any.
    fn discrete_state(&self) -> Vec<usize> {
        Vec::new()
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddBias(Var, Var),
    LeakyRelu(Var, f32),
    Exp(Var),
    Tanh(Var),
    SumAll(Var),
    MeanAll(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<Var>, axis: usize },
    NarrowCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    GroupWeightedSum { values: Var, weights: Var },
    MaxRows { x: Var, argmax: Vec<usize> },
    NormalizeRows { x: Var, norms: Vec<f32> },
    Sinusoidal { t: Var, max_period: f32 },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
    frozen: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.leaves.get(v))
    }

    /// One gradient per parameter of `store`, zero-filled for unused parameters.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.param(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            })
            .collect()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Dimension { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(AutodiffError::Dimension { op, lhs: t.shape().to_vec(), rhs: vec![] });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph in which parameters enter as constants; nothing is differentiable.
    pub fn inference() -> Self {
        Self { frozen: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every discrete choice on the differentiable path: gather indices,
    /// row maxima, leaky-ReLU branches and custom-op state. Two forward passes with
    /// equal signatures are on the same smooth piece of the loss.
    pub fn discrete_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::GatherRows { idx, .. } => idx.hash(&mut h),
                Op::MaxRows { argmax, .. } => argmax.hash(&mut h),
                Op::LeakyRelu(x, _) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::Custom { op, .. } => op.discrete_state().hash(&mut h),
                _ => 0u8.hash(&mut h),
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        let requires_grad = !self.frozen;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn map(&self, x: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    /// Scalar-times-tensor.
    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let value = self.map(x, |v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        let value = self.map(x, |v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = require_matrix("add_bias", tx)?;
        if tb.numel() != n {
            return Err(dim_err("add_bias", tx, tb));
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let value = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.map(x, f32::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map(x, f32::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| f64::from(v)).sum();
        self.push(Tensor::scalar(s as f32), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| f64::from(v)).sum();
        let value = Tensor::scalar((s / t.numel() as f64) as f32);
        self.push(value, Op::MeanAll(x), &[x])
    }

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::Argument(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        if !t.all_finite() {
            return Err(AutodiffError::NonFinite("softmax"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0f32; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f32::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut total = 0.0f32;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(AutodiffError::Argument("concat needs at least one part and axis 0 or 1".into()));
        }
        let first = self.value(parts[0]);
        let (r0, c0) = require_matrix("concat", first)?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = require_matrix("concat", t)?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(dim_err("concat", first, t));
            }
            dims.push((r, c));
        }
        let value = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let data = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = require_matrix("narrow_cols", t)?;
        if len == 0 || start + len > c {
            return Err(AutodiffError::Argument(format!("narrow {start}..{} of {c} columns", start + len)));
        }
        let data = (0..r).flat_map(|i| t.row(i)[start..start + len].iter().copied()).collect();
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(value, Op::NarrowCols { x, start }, &[x]))
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        if idx.is_empty() {
            return Err(AutodiffError::Argument("gather with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Argument(format!("gather index {bad} out of {rows} rows")));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `out[m] = sum_k weights[m, k] * values[m * K + k]` for `values: [M*K, C]`, `weights: [M, K]`.
    pub fn group_weighted_sum(&mut self, values: Var, weights: Var) -> Result<Var> {
        let (tv, tw) = (self.value(values), self.value(weights));
        let (rows, c) = require_matrix("group_weighted_sum", tv)?;
        let (m, k) = require_matrix("group_weighted_sum", tw)?;
        if m * k != rows {
            return Err(dim_err("group_weighted_sum", tv, tw));
        }
        let (v, w) = (tv.data(), tw.data());
        let mut out = vec![0.0f32; m * c];
        for g in 0..m {
            let dst = &mut out[g * c..(g + 1) * c];
            for j in 0..k {
                let wt = w[g * k + j];
                let src = &v[(g * k + j) * c..(g * k + j + 1) * c];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += wt * s;
                }
            }
        }
        let value = Tensor::new(vec![m, c], out)?;
        Ok(self.push(value, Op::GroupWeightedSum { values, weights }, &[values, weights]))
    }

    /// Per-column maximum over rows, `[n, c] -> [1, c]`; ties go to the lowest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = require_matrix("max_rows", t)?;
        let mut argmax = vec![0usize; c];
        let mut best = t.row(0).to_vec();
        for r in 1..n {
            for (j, &v) in t.row(r).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let value = Tensor::new(vec![1, c], best)?;
        Ok(self.push(value, Op::MaxRows { x, argmax }, &[x]))
    }

    /// Scales every row to unit Euclidean length.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = require_matrix("normalize_rows", t)?;
        let mut norms = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(c) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Sinusoidal embedding of an `[n, 1]` column into `[n, dim]` (`dim` even):
    /// first half `sin(t * f_j)`, second half `cos(t * f_j)`, `f_j = max_period^(-j / half)`.
    pub fn sinusoidal(&mut self, t: Var, dim: usize, max_period: f32) -> Result<Var> {
        let tt = self.value(t);
        if tt.cols() != 1 || dim == 0 || dim % 2 != 0 {
            return Err(AutodiffError::Argument(format!(
                "sinusoidal needs an [n, 1] input and even dim, got {:?} / {dim}",
                tt.shape()
            )));
        }
        let half = dim / 2;
        let n = tt.rows();
        let mut out = vec![0.0f32; n * dim];
        for (i, &tv) in tt.data().iter().enumerate() {
            for j in 0..half {
                let f = sinusoid_freq(j, half, max_period);
                out[i * dim + j] = (tv * f).sin();
                out[i * dim + half + j] = (tv * f).cos();
            }
        }
        let value = Tensor::new(vec![n, dim], out)?;
        Ok(self.push(value, Op::Sinusoidal { t, max_period }, &[t]))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of all differentiable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::GraphConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        let mut leaves = HashMap::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaves.insert(Var(i), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { leaves, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contrib: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let acc = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(acc);
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dC B^T, dB = A^T dC
                self.accumulate_with(grads, *a, |acc| gemm(m, n, k, g, false, tb.data(), true, acc, true));
                self.accumulate_with(grads, *b, |acc| gemm(k, m, n, ta.data(), true, g, false, acc, true));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                let n = self.value(*b).numel();
                self.accumulate_with(grads, *b, |acc| {
                    for row in g.chunks_exact(n) {
                        acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let tx = self.value(*x).data();
                let d = g.iter().zip(tx).map(|(g, &v)| if v > 0.0 { *g } else { g * slope }).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Tanh(x) => {
                let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f32; n]);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                let mut d = vec![0.0f32; y.len()];
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let dot: f32 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        self.accumulate(grads, p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                } else {
                    let total = out.cols();
                    let mut col = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let d = g.chunks_exact(total).flat_map(|row| row[col..col + c].iter().copied()).collect();
                        self.accumulate(grads, p, d);
                        col += c;
                    }
                }
            }
            Op::NarrowCols { x, start } => {
                let c = self.value(*x).cols();
                let len = out.cols();
                self.accumulate_with(grads, *x, |acc| {
                    for (dst, src) in acc.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        dst[*start..*start + len].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                self.accumulate_with(grads, *x, |acc| {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut acc[src * c..(src + 1) * c];
                        dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(a, s)| *a += s);
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::GroupWeightedSum { values, weights } => {
                let (tv, tw) = (self.value(*values), self.value(*weights));
                let c = tv.cols();
                let (m, k) = (tw.shape()[0], tw.shape()[1]);
                let (v, w) = (tv.data(), tw.data());
                self.accumulate_with(grads, *values, |acc| {
                    for grp in 0..m {
                        let go = &g[grp * c..(grp + 1) * c];
                        for j in 0..k {
                            let wt = w[grp * k + j];
                            let row = grp * k + j;
                            acc[row * c..(row + 1) * c].iter_mut().zip(go).for_each(|(a, s)| *a += wt * s);
                        }
                    }
                });
                self.accumulate_with(grads, *weights, |acc| {
                    for grp in 0..m {
                        let go = &g[grp * c..(grp + 1) * c];
                        for j in 0..k {
                            let row = grp * k + j;
                            let dot: f32 = v[row * c..(row + 1) * c].iter().zip(go).map(|(a, b)| a * b).sum();
                            acc[row] += dot;
                        }
                    }
                });
            }
            Op::MaxRows { x, argmax } => {
                let c = argmax.len();
                self.accumulate_with(grads, *x, |acc| {
                    for (j, &r) in argmax.iter().enumerate() {
                        acc[r * c + j] += g[j];
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let c = out.cols();
                let y = out.data();
                let mut d = vec![0.0f32; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sinusoidal { t, max_period } => {
                let dim = out.cols();
                let half = dim / 2;
                let tv = self.value(*t).data();
                let d = tv
                    .iter()
                    .enumerate()
                    .map(|(i, &tval)| {
                        (0..half)
                            .map(|j| {
                                let f = sinusoid_freq(j, half, *max_period);
                                let (s, c) = (tval * f).sin_cos();
                                g[i * dim + j] * f * c - g[i * dim + half + j] * f * s
                            })
                            .sum()
                    })
                    .collect();
                self.accumulate(grads, *t, d);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec())?;
                let results = op.backward(&ins, out, &gt);
                if results.len() != inputs.len() {
                    return Err(AutodiffError::Argument(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        results.len(),
                        inputs.len()
                    )));
                }
                for (&v, r) in inputs.iter().zip(results) {
                    if let Some(r) = r {
                        if r.shape() != self.value(v).shape() {
                            return Err(dim_err("custom backward", &r, self.value(v)));
                        }
                        self.accumulate(grads, v, r.into_data());
                    }
                }
            }
        }
        Ok(())
    }
}

fn sinusoid_freq(j: usize, half: usize, max_period: f32) -> f32 {
    (-(max_period.ln()) * j as f32 / half as f32).exp()
}
