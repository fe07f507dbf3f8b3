//! Volume data model, VOL1 file format, dataset manifests, phantom
//! generation, and the flip/rotation augmentation group.

mod manifest;
mod orientation;
mod phantom;
mod volume;

pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use orientation::{
    apply_orientation, enumerate_orientations, random_augment, Orientation, IDENTITY,
};
pub use phantom::{generate_phantoms, PhantomConfig};
pub use volume::{load_volume, save_volume, Volume, DTYPE_F32, VOL1_MAGIC};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad dims: {0}")]
    BadDims(String),
    #[error("bad magic {0:?}, expected \"VOL1\"")]
    BadMagic(String),
    #[error("truncated volume file: {0}")]
    Truncated(String),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("invalid orientation: {0}")]
    InvalidOrientation(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
