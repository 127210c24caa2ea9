use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slpgen_autodiff::Tensor;
use slpgen_core::data::{random_spec, sample_shape, ShapeKind};
use slpgen_core::diffusion::{DdpmConfig, DdpmKind, DenoiserConfig, LatentDdpm, ScheduleConfig};
use slpgen_core::geometry::{fps_points, normalize_cloud, FpsStrategy, PointCloud};
use slpgen_core::nets::{AeConfig, Autoencoder, LatentPosterior};
use slpgen_core::train::*;
use slpgen_core::Error;

fn clouds(n: usize, points: usize, seed: u64) -> Vec<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let kind = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            normalize_cloud(&sample_shape(&random_spec(kind, &mut rng), points).unwrap())
        })
        .collect()
}

fn posterior(k: usize, d: usize, mean: f32, logvar: f32) -> LatentPosterior {
    LatentPosterior { mean: Tensor::full(vec![k, d], mean), logvar: Tensor::full(vec![k, d], logvar) }
}

#[test]
fn perfect_outputs_have_zero_loss() {
    let cloud = &clouds(1, 64, 1)[0];
    let levels: Vec<_> = [16, 32].iter().map(|&m| fps_points(cloud.positions(), m, FpsStrategy::CentroidSeeded).unwrap()).chain([cloud.positions().to_vec()]).collect();
    let parts = ae_loss(cloud, &levels, cloud.normals().unwrap(), &posterior(4, 3, 0.0, 0.0), LossWeights::default()).unwrap();
    assert_eq!(parts.cd, vec![0.0; 3]);
    assert!(parts.nc.abs() < 1e-6 && parts.kl.abs() < 1e-9 && parts.total.abs() < 1e-6, "{parts:?}");
}

#[test]
fn loss_parts_are_nonnegative_and_weighted_sum_is_total() {
    let cloud = &clouds(2, 64, 2)[0];
    let other = &clouds(2, 64, 3)[1];
    let levels = vec![other.positions()[..16].to_vec(), other.positions().to_vec()];
    let normals = other.normals().unwrap();
    for w in [LossWeights::default(), LossWeights { nc: 0.0, kl: 0.0 }, LossWeights { nc: 2.0, kl: 0.5 }] {
        let parts = ae_loss(cloud, &levels, normals, &posterior(4, 3, 0.3, -1.0), w).unwrap();
        assert!(parts.cd.iter().all(|&c| c > 0.0) && parts.nc > 0.0 && parts.kl > 0.0);
        assert!((parts.weighted_sum(w) - parts.total).abs() < 1e-6 * parts.total.max(1.0));
    }
    // KL of N(0.3, e^-1) against N(0, 1), per entry.
    let parts = ae_loss(cloud, &levels, normals, &posterior(4, 3, 0.3, -1.0), LossWeights::default()).unwrap();
    let expected = 0.5 * (0.09 + (-1.0f64).exp() + 1.0 - 1.0);
    assert!((parts.kl - expected).abs() < 1e-6);
}

#[test]
fn loss_rejects_mismatched_outputs() {
    let cloud = &clouds(1, 32, 4)[0];
    let post = posterior(2, 2, 0.0, 0.0);
    let w = LossWeights::default();
    let short = vec![cloud.positions()[..16].to_vec()];
    assert!(matches!(ae_loss(cloud, &short, &cloud.normals().unwrap()[..16], &post, w), Err(Error::Contract(_))));
    let full = vec![cloud.positions().to_vec()];
    assert!(ae_loss(cloud, &full, &cloud.normals().unwrap()[..5], &post, w).is_err());
    assert!(ae_loss(cloud, &[], &[], &post, w).is_err());
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig { epochs: 11, lr: 1e-3, lr_final: Some(1e-5), ..TrainConfig::default() };
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert!((cfg.lr_at(10) - 1e-5).abs() < 1e-9);
    assert!((cfg.lr_at(5) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-8);
    for e in 1..11 {
        assert!(cfg.lr_at(e) < cfg.lr_at(e - 1));
    }
    let constant = TrainConfig { lr_final: None, ..TrainConfig::default() };
    assert_eq!(constant.lr_at(7), constant.lr);
}

#[test]
fn invalid_configs_are_rejected() {
    let base = TrainConfig::default();
    for bad in [
        TrainConfig { batch_size: 0, ..base.clone() },
        TrainConfig { lr: 0.0, ..base.clone() },
        TrainConfig { lr_final: Some(1.0), ..base.clone() },
        TrainConfig { jitter: -1.0, ..base.clone() },
        TrainConfig { centroid_fraction: 1.5, ..base.clone() },
        TrainConfig { weights: LossWeights { nc: -1.0, kl: 0.0 }, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    assert!(base.validate().is_ok());
}

#[test]
fn configs_load_from_toml_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("ae.toml");
    std::fs::write(&toml_path, "stage = \"pos_ddpm\"\nepochs = 7\nlr = 0.003\n[weights]\nnc = 0.5\nkl = 0.0\n").unwrap();
    let cfg = TrainConfig::from_file(&toml_path).unwrap();
    assert_eq!((cfg.stage, cfg.epochs, cfg.lr), (Stage::PosDdpm, 7, 0.003));
    assert_eq!(cfg.weights, LossWeights { nc: 0.5, kl: 0.0 });
    assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);

    let json_path = dir.path().join("cfg.json");
    std::fs::write(&json_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(TrainConfig::from_file(&json_path).unwrap(), cfg);

    std::fs::write(&toml_path, "batch_size = 0\n").unwrap();
    assert!(TrainConfig::from_file(&toml_path).is_err());
    std::fs::write(&toml_path, "epochs = \"many\"\n").unwrap();
    assert!(TrainConfig::from_file(&toml_path).is_err());
}

#[test]
fn epoch_plan_is_deterministic_and_covers_every_cloud() {
    let data = clouds(5, 32, 5);
    let ae = Autoencoder::new(AeConfig::toy(), 0).unwrap();
    let cfg = TrainConfig { batch_size: 2, seed: 4, ..TrainConfig::default() };
    let a = plan_ae_epoch(&ae, &data, &cfg, 3).unwrap();
    assert_eq!(a, plan_ae_epoch(&ae, &data, &cfg, 3).unwrap());
    assert_ne!(a, plan_ae_epoch(&ae, &data, &cfg, 4).unwrap());
    assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    let mut seen: Vec<usize> = a.iter().flatten().map(|i| i.index).collect();
    seen.sort();
    assert_eq!(seen, (0..5).collect::<Vec<_>>());
    for item in a.iter().flatten() {
        assert_eq!(item.latent.len(), 4);
        assert_eq!(item.eps.shape(), &[4, 6]);
    }
}

#[test]
fn autoencoder_training_is_reproducible_and_reports_every_epoch() {
    let data = clouds(3, 32, 6);
    let cfg = TrainConfig { epochs: 4, batch_size: 2, ..TrainConfig::default() };
    let run = || {
        let mut ae = Autoencoder::new(AeConfig::toy(), 1).unwrap();
        let mut seen = Vec::new();
        let report = train_autoencoder(&mut ae, &data, &cfg, |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        (ae.store().checksum(), report)
    };
    let (sum_a, rep_a) = run();
    let (sum_b, rep_b) = run();
    assert_eq!(sum_a, sum_b);
    let totals = |r: &TrainReport| r.epochs.iter().map(|e| e.total).collect::<Vec<_>>();
    assert_eq!(totals(&rep_a), totals(&rep_b));
    for e in &rep_a.epochs {
        assert_eq!(e.cd.len(), 3);
        let w = cfg.weights;
        let sum = e.cd.iter().sum::<f64>() + f64::from(w.nc) * e.nc.unwrap() + f64::from(w.kl) * e.kl.unwrap();
        assert!((sum - e.total).abs() < 1e-5 * e.total, "{e:?}");
    }
    let mut lines = Vec::new();
    rep_a.write_jsonl(&mut lines).unwrap();
    assert_eq!(String::from_utf8(lines).unwrap().lines().count(), 4);
}

#[test]
fn autoencoder_training_reduces_the_loss() {
    let data = clouds(4, 32, 7);
    let mut ae = Autoencoder::new(AeConfig::toy(), 2).unwrap();
    let cfg = TrainConfig { epochs: 200, batch_size: 1, lr: 3e-3, ..TrainConfig::default() };
    let report = train_autoencoder(&mut ae, &data, &cfg, |_| {}).unwrap();
    // Final-level Chamfer; the normal term converges more slowly at this size.
    let first = report.epochs[0].cd[2];
    let last: f64 = report.epochs[190..].iter().map(|e| e.cd[2]).sum::<f64>() / 10.0;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

fn small_ddpm(kind: DdpmKind, dim: usize, seed: u64) -> LatentDdpm {
    let mut denoiser = match kind {
        DdpmKind::Position => DenoiserConfig::position(),
        DdpmKind::Feature => DenoiserConfig::feature(dim),
    };
    denoiser.hidden = 32;
    LatentDdpm::new(DdpmConfig { denoiser, schedule: ScheduleConfig::scaled(50) }, seed).unwrap()
}

#[test]
fn diffusion_stages_train_on_a_frozen_autoencoder() {
    let data = clouds(8, 32, 8);
    let ae = Autoencoder::new(AeConfig::toy(), 3).unwrap();
    let before = ae.store().checksum();

    let pos_cfg = TrainConfig { epochs: 200, batch_size: 8, lr: 2e-3, latent_variants: 2, ..TrainConfig::for_stage(Stage::PosDdpm) };
    let mut pos = small_ddpm(DdpmKind::Position, 3, 4);
    let report = train_position_ddpm(&mut pos, &ae, &data, &pos_cfg, |_| {}).unwrap();
    let mean = |r: &[EpochRecord]| r.iter().map(|e| e.total).sum::<f64>() / r.len() as f64;
    let (early, late) = (mean(&report.epochs[..10]), mean(&report.epochs[190..]));
    assert!(late < 0.5 * early, "{early} -> {late}");
    assert!(pos.data_scale() > 0.0);

    let feat_cfg = TrainConfig { stage: Stage::FeatDdpm, epochs: 3, ..pos_cfg.clone() };
    let mut feat = small_ddpm(DdpmKind::Feature, 6, 5);
    let report = train_feature_ddpm(&mut feat, &ae, &data, &feat_cfg, |_| {}).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert!(report.epochs.iter().all(|e| e.total.is_finite() && e.cd.is_empty() && e.nc.is_none()));
    assert_eq!(ae.store().checksum(), before);
}

#[test]
fn diffusion_stage_mismatches_are_errors() {
    let data = clouds(2, 32, 9);
    let ae = Autoencoder::new(AeConfig::toy(), 3).unwrap();
    let pos_cfg = TrainConfig { epochs: 1, ..TrainConfig::for_stage(Stage::PosDdpm) };
    let feat_cfg = TrainConfig { epochs: 1, ..TrainConfig::for_stage(Stage::FeatDdpm) };
    let mut pos = small_ddpm(DdpmKind::Position, 3, 0);
    let mut feat = small_ddpm(DdpmKind::Feature, 6, 0);
    let mut wide = small_ddpm(DdpmKind::Feature, 7, 0);
    assert!(train_position_ddpm(&mut pos, &ae, &data, &feat_cfg, |_| {}).is_err());
    assert!(train_position_ddpm(&mut feat, &ae, &data, &pos_cfg, |_| {}).is_err());
    assert!(train_feature_ddpm(&mut pos, &ae, &data, &feat_cfg, |_| {}).is_err());
    assert!(matches!(train_feature_ddpm(&mut wide, &ae, &data, &feat_cfg, |_| {}), Err(Error::Config(_))));
    assert!(train_on_pool(&mut pos, &LatentPool { shapes: Vec::new() }, &pos_cfg, |_| {}).is_err());
}

#[test]
fn latent_pool_puts_the_centroid_variant_first() {
    let data = clouds(3, 32, 10);
    let ae = Autoencoder::new(AeConfig::toy(), 3).unwrap();
    let pool = extract_latents(&ae, &data, 3, 1).unwrap();
    assert_eq!(pool.len(), 3);
    for (shape, cloud) in pool.shapes.iter().zip(&data) {
        assert_eq!(shape.len(), 3);
        assert_eq!(shape[0], ae.embed(cloud, FpsStrategy::CentroidStart).unwrap());
        assert!(shape.iter().all(|l| l.k() == 4 && l.dim() == 6));
    }
    assert_eq!(pool, extract_latents(&ae, &data, 3, 1).unwrap());
    assert!(extract_latents(&ae, &[], 3, 1).is_err());
}

#[test]
fn composite_check_helper_reports_agreement() {
    let mut checked = 0;
    for seed in 0..40 {
        if let Some(c) = ae_directional_gradcheck(&AeConfig::toy(), seed, 5e-3).unwrap() {
            assert!(c.rel_error < 2e-3, "seed {seed}: {c:?}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}
