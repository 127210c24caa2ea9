//! Synthetic shape families, dataset generation and PLY I/O.

mod dataset;
mod ply;
mod shapes;

pub use dataset::{
    load_dataset, make_dataset, read_ply_dir, save_dataset, Dataset, DatasetConfig, Manifest, ManifestEntry, Shape,
    MANIFEST_FILE,
};
pub use ply::{decode_ply, encode_ply, read_ply, write_ply};
pub use shapes::{random_spec, sample_shape, Pose, ShapeFamily, ShapeKind, ShapeSpec};
