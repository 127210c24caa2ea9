use std::cmp::Ordering;

use super::{dist2, Point};
use crate::error::{arg, Result};

fn by_distance(a: &(f32, usize), b: &(f32, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// `k` nearest `base` indices for every query, flattened row-major (`|query| * k`).
/// Sorted by ascending distance, ties by ascending index.
pub fn knn_flat(query: &[Point], base: &[Point], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > base.len() {
        return Err(arg(format!("knn: K = {k} with {} base points", base.len())));
    }
    let mut out = Vec::with_capacity(query.len() * k);
    let mut scratch: Vec<(f32, usize)> = Vec::with_capacity(base.len());
    for q in query {
        scratch.clear();
        scratch.extend(base.iter().enumerate().map(|(i, b)| (dist2(q, b), i)));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, by_distance);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(by_distance);
        out.extend(head.iter().map(|&(_, i)| i));
    }
    Ok(out)
}

pub fn knn(query: &[Point], base: &[Point], k: usize) -> Result<Vec<Vec<usize>>> {
    Ok(knn_flat(query, base, k)?.chunks_exact(k).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_query_returns_own_index() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-4.0, 0.5, 1.0]];
        assert_eq!(knn(&pts, &pts, 1).unwrap(), vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn line_example() {
        // distances from 0.6: to 0 -> 0.6, to 1 -> 0.4, to 5 -> 4.4
        let base = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        assert_eq!(knn(&[[0.6, 0.0, 0.0]], &base, 2).unwrap(), vec![vec![1, 0]]);
    }

    #[test]
    fn full_k_is_a_permutation_and_ties_use_index() {
        let base = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [3.0, 0.0, 0.0]];
        let r = knn(&[[0.0; 3]], &base, 4).unwrap();
        assert_eq!(r, vec![vec![0, 1, 2, 3]]);
        assert!(knn(&[[0.0; 3]], &base, 5).is_err());
    }
}
