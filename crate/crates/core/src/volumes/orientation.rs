//! Axis-aligned flip/rotation group of a voxel grid.
//!
//! An orientation is an axis permutation plus per-axis flips: 48 elements
//! for cubic volumes, fewer for anisotropic dims (only extent-preserving
//! permutations are valid).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Volume, VolumeError};

/// Output axis `k` reads source axis `perm[k]`; `flip[k]` mirrors output
/// coordinate `k` before the read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Orientation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

pub const IDENTITY: Orientation = Orientation {
    perm: [0, 1, 2],
    flip: [false, false, false],
};

const PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

impl Orientation {
    pub fn is_identity(&self) -> bool {
        *self == IDENTITY
    }

    /// Valid iff every output axis has the same extent as the source axis
    /// it reads from.
    pub fn is_valid_for(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|k| dims[self.perm[k]] == dims[k])
    }

    /// Orientation equivalent to applying `self` first, then `second`.
    pub fn then(&self, second: &Orientation) -> Orientation {
        let mut perm = [0usize; 3];
        let mut flip = [false; 3];
        for k in 0..3 {
            perm[k] = self.perm[second.perm[k]];
            flip[k] = second.flip[k] ^ self.flip[second.perm[k]];
        }
        Orientation { perm, flip }
    }

    pub fn inverse(&self) -> Orientation {
        let mut perm = [0usize; 3];
        for k in 0..3 {
            perm[self.perm[k]] = k;
        }
        let mut flip = [false; 3];
        for k in 0..3 {
            flip[k] = self.flip[perm[k]];
        }
        Orientation { perm, flip }
    }
}

pub fn apply_orientation(v: &Volume, o: &Orientation) -> Result<Volume, VolumeError> {
    if !o.is_valid_for(v.dims) {
        return Err(VolumeError::InvalidOrientation(format!(
            "permutation {:?} mixes axes of unequal extent in dims {:?}",
            o.perm, v.dims
        )));
    }
    let dims = v.dims;
    let mut voxels = vec![0.0; v.numel()];
    let src = v.voxels();
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let out = [d, h, w];
                let mut s = [0usize; 3];
                for k in 0..3 {
                    let c = if o.flip[k] {
                        dims[k] - 1 - out[k]
                    } else {
                        out[k]
                    };
                    s[o.perm[k]] = c;
                }
                voxels[(d * dims[1] + h) * dims[2] + w] =
                    src[(s[0] * dims[1] + s[1]) * dims[2] + s[2]];
            }
        }
    }
    Ok(Volume::new(v.id.clone(), dims, voxels).expect("dims unchanged"))
}

/// All orientations valid for `dims`, in a fixed deterministic order.
pub fn enumerate_orientations(dims: [usize; 3]) -> Vec<Orientation> {
    let mut out = Vec::new();
    for perm in PERMS {
        if (0..3).any(|k| dims[perm[k]] != dims[k]) {
            continue;
        }
        for bits in 0..8u8 {
            out.push(Orientation {
                perm,
                flip: [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0],
            });
        }
    }
    out
}

/// Uniformly sample a valid orientation and apply it.
pub fn random_augment<R: Rng>(v: &Volume, rng: &mut R) -> (Volume, Orientation) {
    let orientations = enumerate_orientations(v.dims);
    let o = orientations[rng.gen_range(0..orientations.len())];
    let augmented = apply_orientation(v, &o).expect("enumerated orientation is valid");
    (augmented, o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(
            "r",
            dims,
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cubic_count_is_48() {
        assert_eq!(enumerate_orientations([16, 16, 16]).len(), 48);
    }

    #[test]
    fn two_equal_axes_count_is_16() {
        assert_eq!(enumerate_orientations([32, 32, 16]).len(), 16);
    }

    #[test]
    fn all_unequal_axes_count_is_8() {
        assert_eq!(enumerate_orientations([32, 16, 8]).len(), 8);
    }

    #[test]
    fn identity_leaves_volume_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, [4, 4, 4]);
        assert_eq!(
            apply_orientation(&v, &IDENTITY).unwrap().voxels(),
            v.voxels()
        );
    }

    #[test]
    fn flip_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_volume(&mut rng, [4, 5, 6]);
        let o = Orientation {
            perm: [0, 1, 2],
            flip: [false, false, true],
        };
        let once = apply_orientation(&v, &o).unwrap();
        let twice = apply_orientation(&once, &o).unwrap();
        assert_eq!(twice.voxels(), v.voxels());
    }

    #[test]
    fn full_group_preserves_voxel_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(&mut rng, [16, 16, 16]);
        let mut sorted_ref: Vec<f64> = v.voxels().to_vec();
        sorted_ref.sort_by(f64::total_cmp);
        let orientations = enumerate_orientations(v.dims);
        assert_eq!(orientations.len(), 48);
        let mut seen = HashSet::new();
        for o in &orientations {
            let out = apply_orientation(&v, o).unwrap();
            let mut sorted: Vec<f64> = out.voxels().to_vec();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(sorted, sorted_ref);
            seen.insert(out.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        // generic random volumes have no self-symmetry
        assert_eq!(seen.len(), 48);
    }

    #[test]
    fn inverse_undoes_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random_volume(&mut rng, [6, 6, 6]);
        for o in enumerate_orientations(v.dims) {
            let fwd = apply_orientation(&v, &o).unwrap();
            let back = apply_orientation(&fwd, &o.inverse()).unwrap();
            assert_eq!(back.voxels(), v.voxels(), "inverse failed for {o:?}");
        }
    }

    #[test]
    fn composition_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_volume(&mut rng, [5, 5, 5]);
        let orientations = enumerate_orientations(v.dims);
        for _ in 0..64 {
            let a = orientations[rng.gen_range(0..48)];
            let b = orientations[rng.gen_range(0..48)];
            let sequential = apply_orientation(&apply_orientation(&v, &a).unwrap(), &b).unwrap();
            let composed = apply_orientation(&v, &a.then(&b)).unwrap();
            assert_eq!(sequential.voxels(), composed.voxels());
        }
    }

    #[test]
    fn group_closed_under_composition_and_inverse() {
        let orientations = enumerate_orientations([8, 8, 8]);
        let set: HashSet<Orientation> = orientations.iter().copied().collect();
        for a in &orientations {
            assert!(set.contains(&a.inverse()));
            for b in &orientations {
                assert!(set.contains(&a.then(b)));
            }
        }
        assert!(set.contains(&IDENTITY));
    }

    #[test]
    fn invalid_orientation_rejected_for_anisotropic_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = random_volume(&mut rng, [4, 4, 8]);
        let o = Orientation {
            perm: [2, 1, 0],
            flip: [false; 3],
        };
        assert!(apply_orientation(&v, &o).is_err());
    }

    #[test]
    fn random_augment_uniform_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = random_volume(&mut rng, [8, 8, 8]);
        let mut counts = std::collections::HashMap::new();
        let trials = 10_000;
        for _ in 0..trials {
            let (aug, o) = random_augment(&v, &mut rng);
            assert_eq!(apply_orientation(&v, &o).unwrap().voxels(), aug.voxels());
            *counts.entry(o).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 48);
        for (_, c) in counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 1.0 / 48.0).abs() <= 0.01, "freq {freq}");
        }
    }
}
