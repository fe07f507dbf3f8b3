//! Volume data model and the VOL1 file format.
//!
//! VOL1 layout (little-endian): bytes 0-3 magic "VOL1"; bytes 4-15 three
//! u32 extents D,H,W; byte 16 dtype code (0 = f32); bytes 17-19 zero
//! padding; then D*H*W f32 voxels in index order ((d*H + h)*W + w).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::Tensor;

use super::VolumeError;

pub const VOL1_MAGIC: [u8; 4] = *b"VOL1";
pub const DTYPE_F32: u8 = 0;

/// A 3D scalar field. Voxels are stored as f64 in memory but quantized to
/// f32 so that in-memory values always match the on-disk representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub dims: [usize; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        dims: [usize; 3],
        voxels: Vec<f64>,
    ) -> Result<Self, VolumeError> {
        let numel = dims[0] * dims[1] * dims[2];
        if dims.iter().any(|&e| e == 0) {
            return Err(VolumeError::BadDims(format!("zero extent in {dims:?}")));
        }
        if voxels.len() != numel {
            return Err(VolumeError::BadDims(format!(
                "dims {dims:?} imply {numel} voxels, got {}",
                voxels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            dims,
            voxels: voxels.into_iter().map(|v| v as f32 as f64).collect(),
        })
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn numel(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn is_cubic(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    /// View as a single-channel `[1, D, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.dims[0], self.dims[1], self.dims[2]],
            self.voxels.clone(),
        )
        .expect("volume invariant guarantees shape")
    }

    /// Build a volume from a `[1, D, H, W]` tensor.
    pub fn from_tensor(id: impl Into<String>, t: &Tensor) -> Result<Self, VolumeError> {
        if t.shape().len() != 4 || t.shape()[0] != 1 {
            return Err(VolumeError::BadDims(format!(
                "expected [1,D,H,W] tensor, got {:?}",
                t.shape()
            )));
        }
        Volume::new(
            id,
            [t.shape()[1], t.shape()[2], t.shape()[3]],
            t.data().to_vec(),
        )
    }

    /// Affine map sending min to -1 and max to +1. Constant volumes map to
    /// all zeros. Already-normalized volumes are returned unchanged, which
    /// makes normalization idempotent.
    pub fn normalized(&self) -> Volume {
        let min = self.voxels.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self
            .voxels
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            return Volume {
                id: self.id.clone(),
                dims: self.dims,
                voxels: vec![0.0; self.voxels.len()],
            };
        }
        if min == -1.0 && max == 1.0 {
            return self.clone();
        }
        let scale = 2.0 / (max - min);
        let voxels = self
            .voxels
            .iter()
            .map(|&v| ((v - min) * scale - 1.0) as f32 as f64)
            .collect();
        Volume {
            id: self.id.clone(),
            dims: self.dims,
            voxels,
        }
    }
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&VOL1_MAGIC)?;
    for &e in &v.dims {
        out.write_all(&(e as u32).to_le_bytes())?;
    }
    out.write_all(&[DTYPE_F32, 0, 0, 0])?;
    for &x in &v.voxels {
        out.write_all(&(x as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut header = [0u8; 20];
    input
        .read_exact(&mut header)
        .map_err(|_| VolumeError::Truncated("header shorter than 20 bytes".into()))?;
    if header[0..4] != VOL1_MAGIC {
        return Err(VolumeError::BadMagic(
            String::from_utf8_lossy(&header[0..4]).into_owned(),
        ));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let b: [u8; 4] = header[4 + 4 * i..8 + 4 * i].try_into().unwrap();
        *d = u32::from_le_bytes(b) as usize;
    }
    if header[16] != DTYPE_F32 {
        return Err(VolumeError::UnknownDtype(header[16]));
    }
    let numel = dims[0] * dims[1] * dims[2];
    let mut payload = vec![0u8; numel * 4];
    input
        .read_exact(&mut payload)
        .map_err(|_| VolumeError::Truncated(format!("payload shorter than {numel} f32 values")))?;
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Volume::new(id, dims, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let voxels: Vec<f64> = (0..16 * 16 * 16)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let v = Volume::new("t", [16, 16, 16], voxels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vol");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(v.dims, loaded.dims);
        assert_eq!(v.voxels(), loaded.voxels());
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vol");
        std::fs::write(&path, b"XXXX0000000000000000moredata").unwrap();
        match load_volume(&path) {
            Err(VolumeError::BadMagic(m)) => assert_eq!(m, "XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_detected() {
        let v = Volume::new("t", [16, 16, 16], vec![0.0; 4096]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.vol");
        save_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..20 + 10 * 4]).unwrap();
        assert!(matches!(load_volume(&path), Err(VolumeError::Truncated(_))));
    }

    #[test]
    fn unknown_dtype_detected() {
        let v = Volume::new("t", [2, 2, 2], vec![0.0; 8]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dtype.vol");
        save_volume(&v, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[16] = 7;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_volume(&path),
            Err(VolumeError::UnknownDtype(7))
        ));
    }

    #[test]
    fn normalize_maps_min_max() {
        let v = Volume::new("t", [1, 1, 3], vec![0.0, 5.0, 10.0]).unwrap();
        let n = v.normalized();
        assert_eq!(n.voxels(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_constant_to_zeros() {
        let v = Volume::new("t", [1, 1, 3], vec![4.0, 4.0, 4.0]).unwrap();
        assert_eq!(v.normalized().voxels(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let voxels: Vec<f64> = (0..64).map(|_| rng.gen_range(-7.0..13.0)).collect();
        let v = Volume::new("t", [4, 4, 4], voxels).unwrap();
        let once = v.normalized();
        let twice = once.normalized();
        assert_eq!(once.voxels(), twice.voxels());
    }
}
