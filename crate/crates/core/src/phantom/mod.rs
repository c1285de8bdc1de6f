//! Synthetic LGE-like volumes: a bright blood pool (ellipsoid body plus vein
//! stubs) wrapped in a dark nulled wall that carries bright scar patches, on
//! a mid-grey background with additive Gaussian noise.

mod dataset;
mod generate;
mod mask;
mod volume;

pub use dataset::{assign_folds, derive_seed, make_dataset, Dataset, DatasetEntry, DatasetManifest, DATASET_FORMAT, MANIFEST_FILE};
pub use generate::{generate, sample_geometry, wall_shell, Contrast, Geometry, PhantomSpec, Tube};
pub use mask::Mask;
pub use volume::{read_header, Volume, VolumeHeader, MAX_HEADER_BYTES, VOLUME_MAGIC};
