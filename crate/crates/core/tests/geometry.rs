use proptest::prelude::*;
use slpgen_core::geometry::{
    chamfer, dist2, emd, fps, knn, normal_consistency, FpsPick, FpsStrategy, Point, PointCloud,
};

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_emd(a: &[Point], b: &[Point]) -> f64 {
    permutations(a.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| f64::from(dist2(&a[i], &b[j]))).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        / a.len() as f64
}

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), n)
}

fn min_dist_to(p: &Point, prefix: &[Point]) -> f32 {
    prefix.iter().map(|q| dist2(p, q)).fold(f32::INFINITY, f32::min)
}

proptest! {
    #[test]
    fn fps_is_greedy_optimal(pts in points(2..65), frac in 0.1f64..1.0, seed in any::<u64>(), centroid in any::<bool>()) {
        let k = ((pts.len() as f64 * frac).ceil() as usize).clamp(1, pts.len());
        let strategy = if centroid { FpsStrategy::CentroidStart } else { FpsStrategy::RandomStart(seed) };
        let picks = fps(&pts, k, strategy).unwrap();
        let c = slpgen_core::geometry::centroid(&pts);
        let mut prefix: Vec<Point> = Vec::new();
        let mut chosen = vec![false; pts.len()];
        for (step, pick) in picks.iter().enumerate() {
            match *pick {
                FpsPick::Centroid => {
                    prop_assert_eq!(step, 0);
                    prefix.push(c);
                }
                FpsPick::Index(i) => {
                    prop_assert!(!chosen[i]);
                    if !prefix.is_empty() {
                        let mine = min_dist_to(&pts[i], &prefix);
                        for (j, p) in pts.iter().enumerate() {
                            if !chosen[j] {
                                let other = min_dist_to(p, &prefix);
                                prop_assert!(mine > other || (mine == other && i <= j));
                            }
                        }
                    }
                    chosen[i] = true;
                    prefix.push(pts[i]);
                }
            }
        }
    }

    #[test]
    fn centroid_fps_set_ignores_input_order(pts in points(3..40), rot in 1usize..39, k in 2usize..10) {
        let k = k.min(pts.len());
        let shifted: Vec<Point> = (0..pts.len()).map(|i| pts[(i + rot) % pts.len()]).collect();
        let set = |p: &[Point]| {
            let mut v: Vec<[u32; 3]> = fps(p, k, FpsStrategy::CentroidStart)
                .unwrap()
                .into_iter()
                .filter_map(|x| match x { FpsPick::Index(i) => Some(p[i].map(f32::to_bits)), FpsPick::Centroid => None })
                .collect();
            v.sort_unstable();
            v
        };
        // random float clouds have pairwise-distinct distances with probability one; the
        // centroid may differ in the last bit between orders, so compare only when it agrees
        let (c1, c2) = (slpgen_core::geometry::centroid(&pts), slpgen_core::geometry::centroid(&shifted));
        prop_assume!(c1 == c2);
        prop_assert_eq!(set(&pts), set(&shifted));
    }

    #[test]
    fn emd_matches_enumeration(a in points(1..8), seed in any::<u64>()) {
        let n = a.len();
        let b: Vec<Point> = (0..n).map(|i| {
            let s = seed.wrapping_add(i as u64).wrapping_mul(0x9e3779b97f4a7c15);
            [0, 1, 2].map(|d| ((s >> (d * 16)) & 0xffff) as f32 / 65535.0 * 2.0 - 1.0)
        }).collect();
        let ca = PointCloud::new(a.clone()).unwrap();
        let cb = PointCloud::new(b.clone()).unwrap();
        let got = emd(&ca, &cb).unwrap();
        prop_assert!((got - brute_emd(&a, &b)).abs() < 1e-6);
        // an assignment is one particular matching, so it never beats nearest neighbors
        let (_, d) = slpgen_core::geometry::nearest(&a, &b);
        let one_sided = d.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        prop_assert!(got + 1e-9 >= one_sided);
    }

    #[test]
    fn distances_vanish_exactly_on_permuted_copies(a in points(1..9), rot in 0usize..8) {
        let n = a.len();
        let b: Vec<Point> = (0..n).map(|i| a[(i + rot) % n]).collect();
        let (ca, cb) = (PointCloud::new(a.clone()).unwrap(), PointCloud::new(b).unwrap());
        prop_assert_eq!(chamfer(&ca, &cb), 0.0);
        prop_assert_eq!(emd(&ca, &cb).unwrap(), 0.0);
    }

    #[test]
    fn distances_are_positive_on_different_sets(a in points(1..9), shift in 0.01f32..1.0) {
        let b: Vec<Point> = a.iter().map(|p| [p[0] + shift, p[1], p[2]]).collect();
        let (ca, cb) = (PointCloud::new(a).unwrap(), PointCloud::new(b).unwrap());
        prop_assert!(chamfer(&ca, &cb) > 0.0);
        prop_assert!(emd(&ca, &cb).unwrap() > 0.0);
        prop_assert_eq!(chamfer(&ca, &cb), chamfer(&cb, &ca));
    }

    #[test]
    fn knn_sorted_by_distance_then_index(base in points(1..30), q in prop::array::uniform3(-1.0f32..1.0), k in 1usize..30) {
        let k = k.min(base.len());
        let r = &knn(&[q], &base, k).unwrap()[0];
        let mut expected: Vec<(f32, usize)> = base.iter().enumerate().map(|(i, b)| (dist2(&q, b), i)).collect();
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = expected.into_iter().take(k).map(|x| x.1).collect();
        prop_assert_eq!(r, &expected);
    }

    #[test]
    fn normal_consistency_is_bounded_and_sign_blind(a in points(1..20), flip in any::<bool>()) {
        let normals: Vec<Point> = a.iter().map(|p| {
            let v = [p[0] + 2.0, p[1], p[2]];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|x| x / l)
        }).collect();
        let other: Vec<Point> = normals.iter().map(|n| if flip { n.map(|x| -x) } else { [n[1], n[2], n[0]] }).collect();
        let ca = PointCloud::with_normals(a.clone(), normals).unwrap();
        let cb = PointCloud::with_normals(a, other).unwrap();
        let nc = normal_consistency(&ca, &cb).unwrap();
        prop_assert!((0.0..=1.0).contains(&nc));
        if flip {
            prop_assert!(nc < 1e-6);
        }
    }
}
