//! Set-level generative metrics: leave-one-out 1-NN accuracy, minimum matching
//! distance (MMD) and coverage (COV), each under a choice of cloud distance.
//!
//! Ties between equal distances always go to the lower index (gen before ref
//! in the 1-NN union), so reports are reproducible bit for bit.

use std::fmt;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::geometry::{chamfer, emd, normal_consistency, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Chamfer,
    Emd,
    NormalConsistency,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Chamfer, Metric::Emd, Metric::NormalConsistency];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Chamfer => "CD",
            Metric::Emd => "EMD",
            Metric::NormalConsistency => "NC",
        }
    }

    pub fn distance(self, a: &PointCloud, b: &PointCloud) -> Result<f64> {
        match self {
            Metric::Chamfer => Ok(chamfer(a, b)),
            Metric::Emd => emd(a, b),
            Metric::NormalConsistency => normal_consistency(a, b),
        }
    }
}

/// Dense row-major distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DistanceMatrix {
        let data = (0..self.cols).flat_map(|j| (0..self.rows).map(move |i| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        DistanceMatrix { rows: self.cols, cols: self.rows, data }
    }
}

fn check_nonempty(set: &[PointCloud], what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(arg(format!("{what} set is empty")));
    }
    Ok(())
}

/// Evaluates `pairs` in parallel across the available cores.
fn eval_pairs(a: &[PointCloud], b: &[PointCloud], pairs: &[(usize, usize)], metric: Metric) -> Result<Vec<f64>> {
    let workers = thread::available_parallelism().map_or(1, usize::from).min(pairs.len().max(1));
    let chunk = pairs.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|&(i, j)| metric.distance(&a[i], &b[j])).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for h in handles {
            out.extend(h.join().expect("distance worker panicked")?);
        }
        Ok(out)
    })
}

/// `|a| x |b|` matrix of `metric(a_i, b_j)`.
pub fn pairwise_matrix(a: &[PointCloud], b: &[PointCloud], metric: Metric) -> Result<DistanceMatrix> {
    check_nonempty(a, "first")?;
    check_nonempty(b, "second")?;
    let pairs: Vec<_> = (0..a.len()).flat_map(|i| (0..b.len()).map(move |j| (i, j))).collect();
    Ok(DistanceMatrix { rows: a.len(), cols: b.len(), data: eval_pairs(a, b, &pairs, metric)? })
}

/// Within-set matrix: zero diagonal, upper triangle computed and mirrored.
pub fn self_matrix(a: &[PointCloud], metric: Metric) -> Result<DistanceMatrix> {
    check_nonempty(a, "cloud")?;
    let n = a.len();
    let pairs: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = eval_pairs(a, a, &pairs, metric)?;
    let mut data = vec![0.0; n * n];
    for (&(i, j), v) in pairs.iter().zip(values) {
        data[i * n + j] = v;
        data[j * n + i] = v;
    }
    Ok(DistanceMatrix { rows: n, cols: n, data })
}

/// The three blocks needed by every metric here.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseBlocks {
    pub gen_gen: DistanceMatrix,
    pub gen_ref: DistanceMatrix,
    pub ref_ref: DistanceMatrix,
}

pub fn pairwise_blocks(gen: &[PointCloud], reference: &[PointCloud], metric: Metric) -> Result<PairwiseBlocks> {
    Ok(PairwiseBlocks {
        gen_gen: self_matrix(gen, metric)?,
        gen_ref: pairwise_matrix(gen, reference, metric)?,
        ref_ref: self_matrix(reference, metric)?,
    })
}

/// Index of the smallest value, lowest index on ties; `skip` is excluded.
fn argmin(values: impl Iterator<Item = f64>, skip: Option<usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if Some(i) == skip {
            continue;
        }
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Leave-one-out 1-NN accuracy over the union `gen ++ ref`; 0.5 means indistinguishable.
pub fn one_nn_from(blocks: &PairwiseBlocks) -> Result<f64> {
    let (ng, nr) = (blocks.gen_ref.rows, blocks.gen_ref.cols);
    if ng < 2 || nr < 2 {
        return Err(arg(format!("1-NN needs at least 2 clouds per set, got {ng} and {nr}")));
    }
    let ref_gen = blocks.gen_ref.transpose();
    let mut correct = 0usize;
    for i in 0..ng + nr {
        let is_gen = i < ng;
        let row: Vec<f64> = if is_gen {
            blocks.gen_gen.row(i).iter().chain(blocks.gen_ref.row(i)).copied().collect()
        } else {
            ref_gen.row(i - ng).iter().chain(blocks.ref_ref.row(i - ng)).copied().collect()
        };
        let nn = argmin(row.into_iter(), Some(i)).expect("at least 3 clouds");
        if (nn < ng) == is_gen {
            correct += 1;
        }
    }
    Ok(correct as f64 / (ng + nr) as f64)
}

/// Mean over reference clouds of the distance to their closest generated cloud.
pub fn mmd_from(gen_ref: &DistanceMatrix) -> f64 {
    (0..gen_ref.cols).map(|j| (0..gen_ref.rows).map(|i| gen_ref.get(i, j)).fold(f64::INFINITY, f64::min)).sum::<f64>()
        / gen_ref.cols as f64
}

/// Fraction of reference clouds that are the nearest reference of some generated cloud.
pub fn cov_from(gen_ref: &DistanceMatrix) -> f64 {
    let mut hit = vec![false; gen_ref.cols];
    for i in 0..gen_ref.rows {
        if let Some(j) = argmin(gen_ref.row(i).iter().copied(), None) {
            hit[j] = true;
        }
    }
    hit.iter().filter(|&&h| h).count() as f64 / gen_ref.cols as f64
}

pub fn one_nn(gen: &[PointCloud], reference: &[PointCloud], metric: Metric) -> Result<f64> {
    if gen.len() < 2 || reference.len() < 2 {
        return Err(arg("1-NN needs at least 2 clouds per set"));
    }
    one_nn_from(&pairwise_blocks(gen, reference, metric)?)
}

pub fn mmd(gen: &[PointCloud], reference: &[PointCloud], metric: Metric) -> Result<f64> {
    Ok(mmd_from(&pairwise_matrix(gen, reference, metric)?))
}

pub fn cov(gen: &[PointCloud], reference: &[PointCloud], metric: Metric) -> Result<f64> {
    Ok(cov_from(&pairwise_matrix(gen, reference, metric)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub one_nn: f64,
    pub mmd: f64,
    pub cov: f64,
    pub generated: usize,
    pub reference: usize,
}

/// All three metrics from one set of distance blocks.
pub fn evaluate(gen: &[PointCloud], reference: &[PointCloud], metric: Metric) -> Result<MetricReport> {
    let blocks = pairwise_blocks(gen, reference, metric)?;
    Ok(MetricReport {
        metric,
        one_nn: one_nn_from(&blocks)?,
        mmd: mmd_from(&blocks.gen_ref),
        cov: cov_from(&blocks.gen_ref),
        generated: gen.len(),
        reference: reference.len(),
    })
}

/// Fixed-width table of reports.
pub struct ReportTable<'a>(pub &'a [MetricReport]);

impl fmt::Display for ReportTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>8} {:>12} {:>8} {:>6} {:>6}", "metric", "1-NN", "MMD", "COV", "gen", "ref")?;
        for r in self.0 {
            writeln!(
                f,
                "{:<6} {:>8.4} {:>12.6e} {:>8.4} {:>6} {:>6}",
                r.metric.name(),
                r.one_nn,
                r.mmd,
                r.cov,
                r.generated,
                r.reference
            )?;
        }
        Ok(())
    }
}
