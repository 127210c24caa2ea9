use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ply::{read_ply, write_ply};
use super::shapes::{random_spec, sample_shape, ShapeKind, ShapeSpec};
use crate::error::{arg, Error, Result};
use crate::geometry::{normalize_cloud, PointCloud};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Number of shapes per family.
    pub counts: BTreeMap<ShapeKind, usize>,
    pub points: usize,
    /// Fraction of each family held out for validation (rounded per family).
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { counts: ShapeKind::ALL.iter().map(|&k| (k, 50)).collect(), points: 512, val_fraction: 0.2, seed: 0 }
    }
}

impl DatasetConfig {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points == 0 {
            return Err(Error::Config("dataset needs at least one point per cloud".into()));
        }
        if self.total() == 0 {
            return Err(Error::Config("dataset has no shapes".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub spec: ShapeSpec,
    /// Normalized cloud with normals.
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Shape>,
    pub val: Vec<Shape>,
}

impl Dataset {
    pub fn train_clouds(&self) -> Vec<PointCloud> {
        self.train.iter().map(|s| s.cloud.clone()).collect()
    }

    pub fn val_clouds(&self) -> Vec<PointCloud> {
        self.val.iter().map(|s| s.cloud.clone()).collect()
    }
}

/// Generates the dataset; the result is a pure function of `config`.
pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (&kind, &count) in &config.counts {
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let spec = random_spec(kind, &mut rng);
            let cloud = normalize_cloud(&sample_shape(&spec, config.points)?);
            shapes.push(Shape { kind, spec, cloud });
        }
        let held_out = (count as f64 * config.val_fraction).round() as usize;
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        let mut is_val = vec![false; count];
        for &i in &order[..held_out] {
            is_val[i] = true;
        }
        for (shape, v) in shapes.into_iter().zip(is_val) {
            if v {
                val.push(shape);
            } else {
                train.push(shape);
            }
        }
    }
    Ok(Dataset { config: config.clone(), train, val })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub family: ShapeKind,
    pub spec: ShapeSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

/// Writes `train/*.ply`, `val/*.ply` and the JSON manifest under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let write_split = |name: &str, shapes: &[Shape]| -> Result<Vec<ManifestEntry>> {
        fs::create_dir_all(dir.join(name))?;
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let rel = PathBuf::from(name).join(format!("{i:04}_{}.ply", s.kind.name()));
                write_ply(&s.cloud, dir.join(&rel))?;
                Ok(ManifestEntry { path: rel, family: s.kind, spec: s.spec })
            })
            .collect()
    };
    let manifest = Manifest {
        config: dataset.config.clone(),
        train: write_split("train", &dataset.train)?,
        val: write_split("val", &dataset.val)?,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Loads a dataset written by [`save_dataset`]; `path` is the directory or the manifest itself.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let (dir, manifest_path) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let load = |entries: &[ManifestEntry]| -> Result<Vec<Shape>> {
        entries
            .iter()
            .map(|e| Ok(Shape { kind: e.family, spec: e.spec, cloud: read_ply(dir.join(&e.path))? }))
            .collect()
    };
    Ok(Dataset { config: manifest.config.clone(), train: load(&manifest.train)?, val: load(&manifest.val)? })
}

/// Every `.ply` file directly inside `dir`, in file-name order.
pub fn read_ply_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, PointCloud)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(arg(format!("no .ply files in {}", dir.as_ref().display())));
    }
    paths.into_iter().map(|p| read_ply(&p).map(|c| (p, c))).collect()
}
