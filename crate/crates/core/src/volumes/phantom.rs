//! Synthetic phantom volumes: smooth random background plus a few
//! ellipsoids/boxes and a low-frequency texture, normalized to [-1, 1].

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Volume, VolumeError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Amplitude of the low-frequency cosine texture.
    pub texture_amplitude: f64,
    /// Number of cosine components in the texture.
    pub texture_components: usize,
    /// Amplitude of the linear background gradient. Kept small by default:
    /// a gradient along one axis maps onto a gradient along any other axis
    /// under flips and axis swaps, so a strong gradient makes distinct
    /// phantoms look alike after reorientation and the shapes are what
    /// actually identifies a phantom.
    #[serde(default = "default_gradient_amplitude")]
    pub gradient_amplitude: f64,
}

fn default_gradient_amplitude() -> f64 {
    0.3
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            min_shapes: 2,
            max_shapes: 4,
            texture_amplitude: 0.3,
            texture_components: 3,
            gradient_amplitude: default_gradient_amplitude(),
        }
    }
}

/// Deterministic in (seed, count, dims, config); volume `i` uses its own
/// RNG stream so parallel and serial generation agree.
pub fn generate_phantoms(
    seed: u64,
    count: usize,
    dims: [usize; 3],
    config: &PhantomConfig,
) -> Result<Vec<Volume>, VolumeError> {
    if count == 0 {
        return Err(VolumeError::BadDims("count must be >= 1".into()));
    }
    if dims.iter().any(|&e| e < 8) {
        return Err(VolumeError::BadDims(format!(
            "phantom dims must be >= 8 per axis, got {dims:?}"
        )));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
            Ok(generate_one(
                &format!("phantom_{i:04}"),
                dims,
                config,
                &mut rng,
            ))
        })
        .collect()
}

fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Shape {
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
    is_box: bool,
}

fn generate_one(
    id: &str,
    dims: [usize; 3],
    config: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> Volume {
    // random linear gradient background
    let a = config.gradient_amplitude;
    let grad: [f64; 3] = if a > 0.0 {
        [
            rng.gen_range(-a..a),
            rng.gen_range(-a..a),
            rng.gen_range(-a..a),
        ]
    } else {
        [0.0; 3]
    };
    // low-frequency cosine texture
    let texture: Vec<([f64; 3], f64, f64)> = (0..config.texture_components)
        .map(|_| {
            let freq = [
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.5..2.5),
            ];
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.3..1.0) * config.texture_amplitude;
            (freq, phase, amp)
        })
        .collect();
    let n_shapes = rng.gen_range(config.min_shapes..=config.max_shapes);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            center: [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
            ],
            radii: [
                rng.gen_range(0.1..0.35),
                rng.gen_range(0.1..0.35),
                rng.gen_range(0.1..0.35),
            ],
            intensity: rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            is_box: rng.gen_bool(0.3),
        })
        .collect();

    let mut voxels = vec![0.0; dims[0] * dims[1] * dims[2]];
    let mut i = 0;
    for d in 0..dims[0] {
        let u0 = d as f64 / (dims[0] - 1) as f64;
        for h in 0..dims[1] {
            let u1 = h as f64 / (dims[1] - 1) as f64;
            for w in 0..dims[2] {
                let u2 = w as f64 / (dims[2] - 1) as f64;
                let u = [u0, u1, u2];
                let mut v = grad[0] * u0 + grad[1] * u1 + grad[2] * u2;
                for (freq, phase, amp) in &texture {
                    let arg = std::f64::consts::TAU * (freq[0] * u0 + freq[1] * u1 + freq[2] * u2)
                        + phase;
                    v += amp * arg.cos();
                }
                for s in &shapes {
                    let r: [f64; 3] = std::array::from_fn(|k| (u[k] - s.center[k]) / s.radii[k]);
                    let inside = if s.is_box {
                        r.iter().all(|x| x.abs() <= 1.0)
                    } else {
                        r.iter().map(|x| x * x).sum::<f64>() <= 1.0
                    };
                    if inside {
                        v += s.intensity;
                    }
                }
                voxels[i] = v;
                i += 1;
            }
        }
    }
    Volume::new(id, dims, voxels)
        .expect("generated voxel count matches dims")
        .normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::ncc;

    #[test]
    fn deterministic_in_seed() {
        let cfg = PhantomConfig::default();
        let a = generate_phantoms(7, 8, [16, 16, 16], &cfg).unwrap();
        let b = generate_phantoms(7, 8, [16, 16, 16], &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.voxels(), y.voxels());
        }
    }

    #[test]
    fn rejects_small_dims_and_zero_count() {
        let cfg = PhantomConfig::default();
        assert!(generate_phantoms(1, 4, [4, 16, 16], &cfg).is_err());
        assert!(generate_phantoms(1, 0, [16, 16, 16], &cfg).is_err());
    }

    #[test]
    fn normalized_range_and_distinct_ids() {
        let cfg = PhantomConfig::default();
        let vols = generate_phantoms(3, 16, [16, 16, 16], &cfg).unwrap();
        let ids: std::collections::HashSet<_> = vols.iter().map(|v| v.id.clone()).collect();
        assert_eq!(ids.len(), 16);
        for v in &vols {
            let min = v.voxels().iter().cloned().fold(f64::INFINITY, f64::min);
            let max = v.voxels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(min, -1.0);
            assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn pairwise_ncc_median_below_threshold() {
        let cfg = PhantomConfig::default();
        let vols = generate_phantoms(11, 64, [16, 16, 16], &cfg).unwrap();
        let mut nccs = Vec::new();
        for i in 0..vols.len() {
            for j in (i + 1)..vols.len() {
                nccs.push(ncc(&vols[i], &vols[j]).unwrap().abs());
            }
        }
        nccs.sort_by(f64::total_cmp);
        let median = nccs[nccs.len() / 2];
        assert!(median < 0.8, "median pairwise |NCC| = {median}");
    }
}
