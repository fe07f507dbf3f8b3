//! Shared network plumbing: deterministic weight init, registering a
//! ParamSet on a tape, and extracting gradients back out.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Gradients, NumericsError, ParamSet, Tape, Tensor, VarId};

/// Uniform He-style init scaled by fan-in.
pub fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    init_tensor_gain(rng, shape, fan_in, 1.0)
}

/// Uniform init with bound gain·sqrt(1/fan_in); a gain near sqrt(2)
/// compensates leaky-relu attenuation in deep trunks.
pub fn init_tensor_gain(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("shape/data agree")
}

/// splitmix64-style seed derivation for independent RNG streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Parameter leaves registered on a tape, in ParamSet order.
pub struct TapeParams {
    vars: Vec<(String, VarId)>,
}

impl TapeParams {
    pub fn register(tape: &mut Tape, params: &ParamSet) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| (n.to_string(), tape.leaf(t.clone())))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> VarId {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    /// Collect per-parameter gradients into a ParamSet with matching names.
    pub fn grads(&self, gradients: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, v) in &self.vars {
            out.insert(n, gradients.get(*v));
        }
        out
    }
}

/// Run backward from a scalar loss and return (loss value, parameter grads).
pub fn loss_and_grads(
    tape: &Tape,
    tape_params: &TapeParams,
    loss: VarId,
) -> Result<(f64, ParamSet), NumericsError> {
    let gradients = tape.backward(loss)?;
    Ok((tape.value(loss).item(), tape_params.grads(&gradients)))
}

/// Average a non-empty list of gradient sets, reducing in index order so the
/// result is independent of how the per-sample passes were scheduled.
pub fn average_grads(mut grad_sets: Vec<ParamSet>) -> Result<ParamSet, NumericsError> {
    let n = grad_sets.len() as f64;
    let mut acc = grad_sets.remove(0);
    for g in &grad_sets {
        acc.axpy(1.0, g)?;
    }
    for (_, t) in acc.iter_mut() {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    Ok(acc)
}

/// Sinusoidal features of a (scaled) timestep, for time conditioning.
pub fn time_features(t: usize, total: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(half * 2);
    let pos = t as f64 / total as f64;
    for i in 0..half {
        let freq = 10f64.powf(4.0 * i as f64 / half.max(1) as f64);
        data.push((pos * freq).sin());
        data.push((pos * freq).cos());
    }
    if data.len() < dim {
        data.push(pos);
    }
    Tensor::from_vec(data)
}
