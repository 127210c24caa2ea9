use proptest::prelude::*;
use slpgen_core::diffusion::{DdpmConfig, DdpmKind, DenoiserConfig, LatentDdpm, ScheduleConfig};
use slpgen_core::edit::*;
use slpgen_core::geometry::{chamfer, Point};
use slpgen_core::nets::{AeConfig, Autoencoder, SparseLatent};

fn ddpm(kind: DdpmKind, dim: usize, seed: u64) -> LatentDdpm {
    let mut denoiser = match kind {
        DdpmKind::Position => DenoiserConfig::position(),
        DdpmKind::Feature => DenoiserConfig::feature(dim),
    };
    denoiser.hidden = 32;
    LatentDdpm::new(DdpmConfig { denoiser, schedule: ScheduleConfig::scaled(20) }, seed).unwrap()
}

fn models() -> Models {
    let ae = Autoencoder::new(AeConfig::toy(), 1).unwrap();
    Models::new(ae, ddpm(DdpmKind::Position, 3, 2), ddpm(DdpmKind::Feature, 6, 3)).unwrap()
}

fn request(latent: &SparseLatent, mask: Vec<bool>, mode: EditMode, seed: u64) -> EditRequest {
    EditRequest { latent: latent.clone(), moved_mask: mask, mode, seed }
}

#[test]
fn models_check_their_pieces() {
    let ae = Autoencoder::new(AeConfig::toy(), 1).unwrap();
    let (p, f) = (ddpm(DdpmKind::Position, 3, 2), ddpm(DdpmKind::Feature, 6, 3));
    assert!(Models::new(ae.clone(), f.clone(), p.clone()).is_err());
    assert!(Models::new(ae, p, ddpm(DdpmKind::Feature, 5, 3)).is_err());
    let m = models();
    assert_eq!((m.k(), m.dim()), (4, 6));
    let a = m.generate(5).unwrap();
    assert_eq!(a, m.generate(5).unwrap());
    assert_ne!(a, m.generate(6).unwrap());
    assert_eq!((a.k(), a.dim()), (4, 6));
}

#[test]
fn keep_features_is_plain_decode() {
    let m = models();
    let latent = m.generate(1).unwrap();
    let out = edit(&request(&latent, vec![false; 4], EditMode::KeepFeatures, 9), &m).unwrap();
    assert_eq!(out.latent, latent);
    assert_eq!(out.cloud, m.ae.decode(&latent).unwrap().cloud);
    let again = edit(&request(&latent, vec![true; 4], EditMode::KeepFeatures, 10), &m).unwrap();
    assert_eq!(again.cloud, out.cloud);
    assert_eq!(out.cloud.len(), 32);
}

#[test]
fn resample_moved_keeps_fixed_rows() {
    let m = models();
    let latent = m.generate(2).unwrap();
    let keep = edit(&request(&latent, vec![false; 4], EditMode::KeepFeatures, 0), &m).unwrap();
    let none_moved = edit(&request(&latent, vec![false; 4], EditMode::ResampleMoved, 3), &m).unwrap();
    assert_eq!(none_moved, keep);

    let mut moved = latent.clone();
    moved.positions[1][0] += 0.3;
    let mask = vec![false, true, false, false];
    let out = edit(&request(&moved, mask.clone(), EditMode::ResampleMoved, 4), &m).unwrap();
    for i in [0, 2, 3] {
        assert_eq!(out.latent.features[i], latent.features[i]);
    }
    assert_ne!(out.latent.features[1], latent.features[1]);
    assert_eq!(out.latent.positions, moved.positions);
    assert_eq!(out, edit(&request(&moved, mask, EditMode::ResampleMoved, 4), &m).unwrap());

    assert!(edit(&request(&latent, vec![true; 4], EditMode::ResampleMoved, 4), &m).is_err());
}

#[test]
fn resample_all_is_seed_dependent() {
    let m = models();
    let latent = m.generate(3).unwrap();
    let a = edit(&request(&latent, vec![false; 4], EditMode::ResampleAll, 1), &m).unwrap();
    let b = edit(&request(&latent, vec![false; 4], EditMode::ResampleAll, 2), &m).unwrap();
    assert!(chamfer(&a.cloud, &b.cloud) > 0.0);
    assert_eq!(a, edit(&request(&latent, vec![false; 4], EditMode::ResampleAll, 1), &m).unwrap());
    assert_eq!(a.latent.positions, latent.positions);
}

#[test]
fn edit_rejects_mismatched_inputs() {
    let m = models();
    let latent = m.generate(4).unwrap();
    assert!(edit(&request(&latent, vec![false; 3], EditMode::KeepFeatures, 0), &m).is_err());
    let narrow = SparseLatent::new(latent.positions.clone(), latent.features.iter().map(|f| f[..5].to_vec()).collect()).unwrap();
    assert!(edit(&request(&narrow, vec![false; 4], EditMode::KeepFeatures, 0), &m).is_err());
    let short = SparseLatent::new(latent.positions[..3].to_vec(), latent.features[..3].to_vec()).unwrap();
    assert!(edit(&request(&short, vec![false; 3], EditMode::ResampleAll, 0), &m).is_err());
}

fn latent(positions: Vec<Point>) -> SparseLatent {
    let features = (0..positions.len()).map(|i| vec![i as f32, -(i as f32)]).collect();
    SparseLatent::new(positions, features).unwrap()
}

#[test]
fn correspondence_hand_cases() {
    let a = latent(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]);
    assert_eq!(correspond(&a, &a, CorrespondStrategy::Positions).unwrap(), Correspondence::identity(4));

    let mut b = a.clone();
    b.positions.swap(1, 3);
    b.features.swap(1, 3);
    let c = correspond(&a, &b, CorrespondStrategy::Positions).unwrap();
    assert_eq!(c.perm, vec![0, 3, 2, 1]);
    assert_eq!(c.apply(&b).unwrap(), a);

    // Translation does not matter after centroid alignment.
    let mut shifted = a.clone();
    for p in &mut shifted.positions {
        p[0] += 10.0;
    }
    assert_eq!(correspond(&a, &shifted, CorrespondStrategy::Positions).unwrap(), Correspondence::identity(4));
    assert!(correspond(&a, &latent(vec![[0.0; 3], [1.0; 3]]), CorrespondStrategy::Positions).is_err());
}

#[test]
fn feature_term_breaks_position_ties() {
    // Symmetric positions: both matchings cost the same until features weigh in.
    let a = SparseLatent::new(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], vec![vec![0.0], vec![5.0]]).unwrap();
    let b = SparseLatent::new(vec![[0.0, -1.0, 0.0], [0.0, 1.0, 0.0]], vec![vec![5.0], vec![0.0]]).unwrap();
    let c = correspond(&a, &b, CorrespondStrategy::PositionsAndFeatures { weight: 1.0 }).unwrap();
    assert_eq!(c.perm, vec![1, 0]);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn centered(points: &[Point]) -> Vec<[f64; 3]> {
    let n = points.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|k| points.iter().map(|p| f64::from(p[k])).sum::<f64>() / n);
    points.iter().map(|p| std::array::from_fn(|k| f64::from(p[k]) - c[k])).collect()
}

fn cost(a: &[[f64; 3]], b: &[[f64; 3]], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| (0..3).map(|k| (a[i][k] - b[j][k]).powi(2)).sum::<f64>()).sum()
}

#[test]
fn three_point_case_with_off_diagonal_optimum() {
    let a = latent(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    let b = latent(vec![[2.1, 0.0, 0.0], [0.1, 0.0, 0.0], [1.1, 0.0, 0.0]]);
    assert_eq!(correspond(&a, &b, CorrespondStrategy::Positions).unwrap().perm, vec![1, 2, 0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correspondence_matches_brute_force(
        pa in prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), 5),
        pb in prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), 5),
    ) {
        let (a, b) = (latent(pa), latent(pb));
        let c = correspond(&a, &b, CorrespondStrategy::Positions).unwrap();
        let mut sorted = c.perm.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..5).collect::<Vec<_>>());
        let (ca, cb) = (centered(&a.positions), centered(&b.positions));
        let best = permutations(5).iter().map(|p| cost(&ca, &cb, p)).fold(f64::INFINITY, f64::min);
        prop_assert!(cost(&ca, &cb, &c.perm) <= best + 1e-5);
    }

    #[test]
    fn masked_rows_never_move(s in 0.0f32..=1.0, mask in prop::collection::vec(any::<bool>(), 4)) {
        let a = latent(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let b = latent(vec![[2.0; 3], [-1.0, 0.5, 0.0], [0.3, 1.0, -2.0], [0.0, 4.0, 1.0]]);
        let b = SparseLatent::new(b.positions, b.features.iter().map(|f| f.iter().map(|v| v * 3.0 + 1.0).collect()).collect()).unwrap();
        let out = interpolate(&a, &b, s, Some(&mask)).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                prop_assert_eq!(out.positions[i], a.positions[i]);
                prop_assert_eq!(&out.features[i], &a.features[i]);
            }
        }
    }
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let a = latent(vec![[0.0, 0.0, 0.0], [0.3, -0.7, 0.1]]);
    let b = SparseLatent::new(vec![[2.0, 0.0, 0.0], [0.9, 0.1, -0.4]], vec![vec![0.7, 0.1], vec![-0.3, 2.2]]).unwrap();
    assert_eq!(interpolate(&a, &b, 0.0, None).unwrap(), a);
    assert_eq!(interpolate(&a, &b, 1.0, None).unwrap(), b);
    let mid = interpolate(&a, &b, 0.5, None).unwrap();
    assert_eq!(mid.positions[0], [1.0, 0.0, 0.0]);
    assert_eq!(mid.features[0], vec![0.35, 0.05]);
    assert!(interpolate(&a, &b, 1.01, None).is_err());
    assert!(interpolate(&a, &b, -0.01, None).is_err());
    assert!(interpolate(&a, &b, f32::NAN, None).is_err());
    assert!(interpolate(&a, &b, 0.5, Some(&[true])).is_err());
    let masked = interpolate(&a, &b, 1.0, Some(&[false, true])).unwrap();
    assert_eq!(masked.positions, vec![b.positions[0], a.positions[1]]);
}

#[test]
fn decoded_interpolation_changes_gradually() {
    let m = models();
    let a = m.generate(10).unwrap();
    let b_raw = m.generate(11).unwrap();
    let b = correspond(&a, &b_raw, CorrespondStrategy::Positions).unwrap().apply(&b_raw).unwrap();
    let grid: Vec<_> = (0..=20).map(|i| m.decode(&interpolate(&a, &b, i as f32 / 20.0, None).unwrap()).unwrap()).collect();
    let steps: Vec<f64> = grid.windows(2).map(|w| chamfer(&w[0], &w[1])).collect();
    let ends = chamfer(&grid[0], &grid[20]);
    let worst = steps.iter().copied().fold(0.0, f64::max);
    // Each 0.05 step moves the decode by a small fraction of the endpoint distance.
    assert!(worst < 0.25 * ends, "worst step {worst}, endpoints {ends}");
}

#[test]
fn combine_copies_rows_with_provenance() {
    let a = latent((0..16).map(|i| [i as f32, 0.0, 0.0]).collect());
    let b = SparseLatent::new((0..16).map(|i| [0.0, i as f32, 0.0]).collect(), (0..16).map(|i| vec![100.0 + i as f32, 1.0]).collect()).unwrap();
    let c = SparseLatent::new((0..16).map(|i| [0.0, 0.0, i as f32]).collect(), (0..16).map(|i| vec![200.0 + i as f32, 2.0]).collect()).unwrap();

    let all: Vec<usize> = (0..16).collect();
    assert_eq!(combine(&[(&a, &all)], 16).unwrap().latent, a);

    let top: Vec<usize> = (8..16).collect();
    let bottom: Vec<usize> = (0..8).collect();
    let halves = combine(&[(&a, &top), (&b, &bottom)], 16).unwrap();
    for (slot, src) in halves.sources.iter().enumerate() {
        let from = [&a, &b][src.part];
        assert_eq!(halves.latent.positions[slot], from.positions[src.index]);
        assert_eq!(halves.latent.features[slot], from.features[src.index]);
    }

    let (pa, pb, pc) = ([0, 2, 4, 6, 8], [1, 3, 5, 7, 9, 11], [15, 14, 13, 12, 10]);
    let three = combine(&[(&a, &pa[..]), (&b, &pb[..]), (&c, &pc[..])], 16).unwrap();
    let expected: Vec<(usize, usize)> = pa.iter().map(|&i| (0, i)).chain(pb.iter().map(|&i| (1, i))).chain(pc.iter().map(|&i| (2, i))).collect();
    assert_eq!(three.sources.iter().map(|s| (s.part, s.index)).collect::<Vec<_>>(), expected);
    let srcs = [&a, &b, &c];
    for (slot, &(p, i)) in expected.iter().enumerate() {
        assert_eq!(three.latent.positions[slot], srcs[p].positions[i]);
        assert_eq!(three.latent.features[slot], srcs[p].features[i]);
    }
}

#[test]
fn combine_rejects_bad_selections() {
    let a = latent((0..4).map(|i| [i as f32, 0.0, 0.0]).collect());
    let wide = SparseLatent::new(a.positions.clone(), vec![vec![0.0; 3]; 4]).unwrap();
    assert!(combine(&[], 4).is_err());
    assert!(combine(&[(&a, &[0, 1, 2])], 4).is_err());
    assert!(combine(&[(&a, &[0, 1, 2, 3]), (&a, &[0])], 4).is_err());
    assert!(combine(&[(&a, &[0, 1, 1, 2])], 4).is_err());
    assert!(combine(&[(&a, &[0, 1, 2, 4])], 4).is_err());
    assert!(combine(&[(&a, &[0, 1]), (&wide, &[2, 3])], 4).is_err());
    assert!(combine(&[(&a, &[0, 1]), (&a, &[0, 1])], 4).is_ok());
}
