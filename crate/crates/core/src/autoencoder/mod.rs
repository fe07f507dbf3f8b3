//! 3D convolutional autoencoder: strided-conv encoder to a compact latent,
//! mirrored transposed-conv decoder with tanh output, trained with a mean
//! L1 reconstruction objective.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{average_grads, derive_seed, init_tensor, loss_and_grads, TapeParams};
use crate::numerics::{AdamConfig, AdamState, NumericsError, ParamSet, Tape, Tensor, VarId};
use crate::volumes::{random_augment, Volume};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum AutoencoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Training(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub dims: [usize; 3],
    /// Spatial downsample factor per axis; must be a power of 2 dividing
    /// every extent.
    pub downsample: usize,
    pub latent_channels: usize,
    /// Channel widths of the intermediate encoder stages; length must be
    /// (log2 downsample) - 1.
    pub hidden_channels: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train on randomly flipped/rotated copies of each sample.
    pub augment: bool,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            downsample: 4,
            latent_channels: 8,
            hidden_channels: vec![16],
            learning_rate: 3e-3,
            epochs: 60,
            batch_size: 8,
            seed: 0,
            augment: false,
        }
    }
}

impl AutoencoderConfig {
    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [
            self.latent_channels,
            self.dims[0] / self.downsample,
            self.dims[1] / self.downsample,
            self.dims[2] / self.downsample,
        ]
    }

    pub fn validate(&self) -> Result<(), AutoencoderError> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(AutoencoderError::Config(format!(
                "downsample must be a power of 2 >= 2, got {}",
                self.downsample
            )));
        }
        for &d in &self.dims {
            if d % self.downsample != 0 {
                return Err(AutoencoderError::Config(format!(
                    "dims {:?} not divisible by downsample {}",
                    self.dims, self.downsample
                )));
            }
        }
        if self.hidden_channels.len() + 1 != self.stages() {
            return Err(AutoencoderError::Config(format!(
                "expected {} hidden channel widths for downsample {}, got {}",
                self.stages() - 1,
                self.downsample,
                self.hidden_channels.len()
            )));
        }
        Ok(())
    }

    /// Encoder stage channel sequence: input 1 -> hidden... -> latent.
    fn channel_seq(&self) -> Vec<usize> {
        let mut seq = vec![1];
        seq.extend(&self.hidden_channels);
        seq.push(self.latent_channels);
        seq
    }
}

/// Encoder + decoder parameters (theta_E, theta_D).
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams(pub ParamSet);

pub fn init_params(config: &AutoencoderConfig) -> Result<AutoencoderParams, AutoencoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xAE));
    let mut p = ParamSet::new();
    let seq = config.channel_seq();
    for s in 0..config.stages() {
        let (cin, cout) = (seq[s], seq[s + 1]);
        p.insert(
            &format!("enc.{s}.k"),
            init_tensor(&mut rng, &[cout, cin, 3, 3, 3], cin * 27),
        );
        p.insert(&format!("enc.{s}.b"), Tensor::zeros(&[cout]));
    }
    for s in 0..config.stages() {
        // decoder mirrors the encoder: latent -> hidden... -> 1
        let (cin, cout) = (seq[config.stages() - s], seq[config.stages() - s - 1]);
        p.insert(
            &format!("dec.{s}.k"),
            init_tensor(&mut rng, &[cin, cout, 4, 4, 4], cin * 64),
        );
        p.insert(&format!("dec.{s}.b"), Tensor::zeros(&[cout]));
    }
    Ok(AutoencoderParams(p))
}

fn check_input_dims(config: &AutoencoderConfig, x: &Tensor) -> Result<(), AutoencoderError> {
    let want = [1, config.dims[0], config.dims[1], config.dims[2]];
    if x.shape() != want {
        return Err(AutoencoderError::Config(format!(
            "input shape {:?} does not match configured dims {want:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Encoder forward on an existing tape.
pub fn encode_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    config: &AutoencoderConfig,
    x: VarId,
) -> Result<VarId, NumericsError> {
    let mut h = x;
    for s in 0..config.stages() {
        h = tape.conv3d(h, tp.var(&format!("enc.{s}.k")), 2, 1)?;
        h = tape.add_channel_bias(h, tp.var(&format!("enc.{s}.b")))?;
        if s + 1 < config.stages() {
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
    }
    Ok(h)
}

/// Decoder forward on an existing tape; final activation tanh.
pub fn decode_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    config: &AutoencoderConfig,
    z: VarId,
) -> Result<VarId, NumericsError> {
    let mut h = z;
    for s in 0..config.stages() {
        h = tape.transposed_conv3d(h, tp.var(&format!("dec.{s}.k")), 2, 1)?;
        h = tape.add_channel_bias(h, tp.var(&format!("dec.{s}.b")))?;
        if s + 1 < config.stages() {
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        } else {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

/// z = E(x)
pub fn encode(
    params: &AutoencoderParams,
    config: &AutoencoderConfig,
    x: &Tensor,
) -> Result<Tensor, AutoencoderError> {
    check_input_dims(config, x)?;
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &params.0);
    let xv = tape.leaf(x.clone());
    let z = encode_on_tape(&mut tape, &tp, config, xv)?;
    Ok(tape.value(z).clone())
}

/// x_hat = D(z)
pub fn decode(
    params: &AutoencoderParams,
    config: &AutoencoderConfig,
    z: &Tensor,
) -> Result<Tensor, AutoencoderError> {
    let want = config.latent_shape();
    if z.shape() != want {
        return Err(AutoencoderError::Config(format!(
            "latent shape {:?} does not match configured {want:?}",
            z.shape()
        )));
    }
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &params.0);
    let zv = tape.leaf(z.clone());
    let x = decode_on_tape(&mut tape, &tp, config, zv)?;
    Ok(tape.value(x).clone())
}

fn sample_loss_and_grads(
    params: &ParamSet,
    config: &AutoencoderConfig,
    x: &Tensor,
) -> Result<(f64, ParamSet), NumericsError> {
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let z = encode_on_tape(&mut tape, &tp, config, xv)?;
    let xh = decode_on_tape(&mut tape, &tp, config, z)?;
    let loss = tape.l1_loss(xv, xh)?;
    loss_and_grads(&tape, &tp, loss)
}

pub struct TrainOutcome {
    pub params: AutoencoderParams,
    /// Per-epoch mean training L1 loss.
    pub loss_curve: Vec<f64>,
}

/// Minimize mean L1 reconstruction loss over the training volumes.
pub fn train_autoencoder(
    config: &AutoencoderConfig,
    train: &[Volume],
) -> Result<TrainOutcome, AutoencoderError> {
    config.validate()?;
    if train.is_empty() {
        return Err(AutoencoderError::Config("empty training corpus".into()));
    }
    let mut params = init_params(config)?.0;
    let mut opt = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xAE01));
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let epoch_seed = derive_seed(config.seed, 0xAE02 ^ epoch as u64);
            let results: Vec<Result<(f64, ParamSet), NumericsError>> = batch
                .par_iter()
                .map(|&i| {
                    let x = if config.augment {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, i as u64));
                        random_augment(&train[i], &mut rng).0.to_tensor()
                    } else {
                        train[i].to_tensor()
                    };
                    sample_loss_and_grads(&params, config, &x)
                })
                .collect();
            let mut grad_sets = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) =
                    r.map_err(|e| AutoencoderError::Training(format!("epoch {epoch}: {e}")))?;
                epoch_loss += l;
                grad_sets.push(g);
            }
            let mean_grads = average_grads(grad_sets)?;
            opt.step(&mut params, &mean_grads)?;
            if !params.all_finite() {
                return Err(AutoencoderError::Training(format!(
                    "non-finite parameters after update in epoch {epoch}"
                )));
            }
        }
        loss_curve.push(epoch_loss / train.len() as f64);
    }
    Ok(TrainOutcome {
        params: AutoencoderParams(params),
        loss_curve,
    })
}

/// Mean L1 reconstruction loss of a volume set under fixed parameters.
pub fn reconstruction_loss(
    params: &AutoencoderParams,
    config: &AutoencoderConfig,
    volumes: &[Volume],
) -> Result<f64, AutoencoderError> {
    let mut total = 0.0;
    for v in volumes {
        let x = v.to_tensor();
        let z = encode(params, config, &x)?;
        let xh = decode(params, config, &z)?;
        let n = x.numel() as f64;
        total += x
            .data()
            .iter()
            .zip(xh.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
    }
    Ok(total / volumes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::{generate_phantoms, PhantomConfig};

    fn tiny_config() -> AutoencoderConfig {
        AutoencoderConfig {
            dims: [16, 16, 16],
            downsample: 4,
            latent_channels: 8,
            hidden_channels: vec![16],
            learning_rate: 3e-3,
            epochs: 2,
            batch_size: 4,
            seed: 1,
            augment: false,
        }
    }

    #[test]
    fn latent_shape_matches_config() {
        let cfg = tiny_config();
        let params = init_params(&cfg).unwrap();
        let v = generate_phantoms(1, 1, cfg.dims, &PhantomConfig::default())
            .unwrap()
            .remove(0);
        let z = encode(&params, &cfg, &v.to_tensor()).unwrap();
        assert_eq!(z.shape(), &[8, 4, 4, 4]);
    }

    #[test]
    fn encode_deterministic() {
        let cfg = tiny_config();
        let params = init_params(&cfg).unwrap();
        let v = generate_phantoms(2, 1, cfg.dims, &PhantomConfig::default())
            .unwrap()
            .remove(0);
        let z1 = encode(&params, &cfg, &v.to_tensor()).unwrap();
        let z2 = encode(&params, &cfg, &v.to_tensor()).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn decode_output_in_open_unit_interval() {
        let cfg = tiny_config();
        let params = init_params(&cfg).unwrap();
        let mut z = Tensor::zeros(&[8, 4, 4, 4]);
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v = ((i % 17) as f64 - 8.0) * 0.5;
        }
        let x = decode(&params, &cfg, &z).unwrap();
        assert_eq!(x.shape(), &[1, 16, 16, 16]);
        assert!(x.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn dims_mismatch_rejected() {
        let cfg = tiny_config();
        let params = init_params(&cfg).unwrap();
        let bad = Tensor::zeros(&[1, 8, 8, 8]);
        assert!(encode(&params, &cfg, &bad).is_err());
        assert!(decode(&params, &cfg, &Tensor::zeros(&[8, 2, 2, 2])).is_err());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = tiny_config();
        let vols = generate_phantoms(5, 6, cfg.dims, &PhantomConfig::default()).unwrap();
        let a = train_autoencoder(&cfg, &vols).unwrap();
        let b = train_autoencoder(&cfg, &vols).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_config();
        cfg.downsample = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.hidden_channels = vec![];
        assert!(cfg.validate().is_err());
    }
}
