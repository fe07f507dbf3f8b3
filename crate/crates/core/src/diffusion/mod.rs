//! DDPM over autoencoder latents: variance schedule, forward noising,
//! epsilon-prediction denoiser training, and ancestral sampling.

mod schedule;

pub use schedule::{make_schedule, VarianceSchedule, DEFAULT_BETA_1, DEFAULT_BETA_T, DEFAULT_T};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::LEAKY_SLOPE;
use crate::nn::{
    average_grads, derive_seed, init_tensor, loss_and_grads, time_features, TapeParams,
};
use crate::numerics::{AdamConfig, AdamState, NumericsError, ParamSet, Tape, Tensor, VarId};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Training(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Latent shape [C, D, H, W] the denoiser operates on.
    pub latent_shape: [usize; 4],
    pub hidden_channels: usize,
    pub time_embed_dim: usize,
    pub t_steps: usize,
    pub beta_1: f64,
    pub beta_t: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            latent_shape: [8, 4, 4, 4],
            hidden_channels: 16,
            time_embed_dim: 16,
            t_steps: DEFAULT_T,
            beta_1: DEFAULT_BETA_1,
            beta_t: DEFAULT_BETA_T,
            learning_rate: 2e-3,
            epochs: 40,
            // batch size 10 by default, matching the reference training setup
            batch_size: 10,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<VarianceSchedule, DiffusionError> {
        make_schedule(self.t_steps, self.beta_1, self.beta_t)
    }
}

/// Per-channel mean and standard deviation of the training latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn compute(latents: &[Tensor]) -> Result<Self, DiffusionError> {
        if latents.is_empty() {
            return Err(DiffusionError::Config("no latents to standardize".into()));
        }
        let c = latents[0].shape()[0];
        let per = latents[0].numel() / c;
        let n = (latents.len() * per) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for z in latents {
            for ch in 0..c {
                for &v in &z.data()[ch * per..(ch + 1) * per] {
                    mean[ch] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for z in latents {
            for ch in 0..c {
                for &v in &z.data()[ch * per..(ch + 1) * per] {
                    var[ch] += (v - mean[ch]) * (v - mean[ch]);
                }
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        if std.iter().any(|&s| s <= 0.0) {
            return Err(DiffusionError::Config(
                "latent channel with zero variance cannot be standardized".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, z: &Tensor) -> Tensor {
        self.apply(z, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, z: &Tensor) -> Tensor {
        self.apply(z, |v, m, s| v * s + m)
    }

    fn apply(&self, z: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = z.shape()[0];
        let per = z.numel() / c;
        let mut data = z.data().to_vec();
        for ch in 0..c {
            for v in &mut data[ch * per..(ch + 1) * per] {
                *v = f(*v, self.mean[ch], self.std[ch]);
            }
        }
        Tensor::new(z.shape().to_vec(), data).expect("shape preserved")
    }
}

/// Noise-prediction network parameters, including the time projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams(pub ParamSet);

pub fn init_denoiser(config: &DiffusionConfig) -> DenoiserParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xD1FF));
    let c = config.latent_shape[0];
    let h = config.hidden_channels;
    let e = config.time_embed_dim;
    let mut p = ParamSet::new();
    p.insert("conv1.k", init_tensor(&mut rng, &[h, c, 3, 3, 3], c * 27));
    p.insert("conv1.b", Tensor::zeros(&[h]));
    p.insert("temb1.w", init_tensor(&mut rng, &[h, e], e));
    p.insert("temb1.b", Tensor::zeros(&[h]));
    p.insert("conv2.k", init_tensor(&mut rng, &[h, h, 3, 3, 3], h * 27));
    p.insert("conv2.b", Tensor::zeros(&[h]));
    p.insert("temb2.w", init_tensor(&mut rng, &[h, e], e));
    p.insert("temb2.b", Tensor::zeros(&[h]));
    p.insert("conv3.k", init_tensor(&mut rng, &[c, h, 3, 3, 3], h * 27));
    p.insert("conv3.b", Tensor::zeros(&[c]));
    DenoiserParams(p)
}

/// Epsilon-prediction forward pass on an existing tape.
pub fn denoise_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    config: &DiffusionConfig,
    z_t: VarId,
    t: usize,
) -> Result<VarId, NumericsError> {
    let temb = tape.leaf(time_features(t, config.t_steps, config.time_embed_dim));
    let mut h = tape.conv3d(z_t, tp.var("conv1.k"), 1, 1)?;
    h = tape.add_channel_bias(h, tp.var("conv1.b"))?;
    let proj1 = tape.dense(temb, tp.var("temb1.w"), tp.var("temb1.b"))?;
    h = tape.add_channel_bias(h, proj1)?;
    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    h = tape.conv3d(h, tp.var("conv2.k"), 1, 1)?;
    h = tape.add_channel_bias(h, tp.var("conv2.b"))?;
    let proj2 = tape.dense(temb, tp.var("temb2.w"), tp.var("temb2.b"))?;
    h = tape.add_channel_bias(h, proj2)?;
    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    h = tape.conv3d(h, tp.var("conv3.k"), 1, 1)?;
    tape.add_channel_bias(h, tp.var("conv3.b"))
}

/// Predict the noise component of a standardized noisy latent.
pub fn predict_noise(
    params: &DenoiserParams,
    config: &DiffusionConfig,
    z_t: &Tensor,
    t: usize,
) -> Result<Tensor, DiffusionError> {
    if z_t.shape() != config.latent_shape {
        return Err(DiffusionError::Shape(format!(
            "latent shape {:?} vs configured {:?}",
            z_t.shape(),
            config.latent_shape
        )));
    }
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &params.0);
    let zv = tape.leaf(z_t.clone());
    let eps = denoise_on_tape(&mut tape, &tp, config, zv, t)?;
    Ok(tape.value(eps).clone())
}

fn randn_like(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )
    .expect("shape/data agree")
}

pub struct DenoiserTrainOutcome {
    pub params: DenoiserParams,
    pub loss_curve: Vec<f64>,
}

/// Train the epsilon-prediction objective on standardized latents.
pub fn train_denoiser(
    config: &DiffusionConfig,
    latents: &[Tensor],
    schedule: &VarianceSchedule,
) -> Result<DenoiserTrainOutcome, DiffusionError> {
    if latents.len() < 2 {
        return Err(DiffusionError::Config(format!(
            "need >= 2 training latents, got {}",
            latents.len()
        )));
    }
    if schedule.len() != config.t_steps {
        return Err(DiffusionError::Config(format!(
            "schedule length {} vs configured T {}",
            schedule.len(),
            config.t_steps
        )));
    }
    let mut params = init_denoiser(config).0;
    let mut opt = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xD1FF01));
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..latents.len()).collect();
        order.shuffle(&mut order_rng);
        let epoch_seed = derive_seed(config.seed, 0xD1FF02 ^ (epoch as u64) << 8);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            let results: Vec<Result<(f64, ParamSet), DiffusionError>> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        epoch_seed,
                        (b * config.batch_size + j) as u64,
                    ));
                    let t = rng.gen_range(1..=config.t_steps);
                    let eps = randn_like(&config.latent_shape, &mut rng);
                    let z_t = schedule.q_sample(&latents[i], t, &eps)?;
                    let mut tape = Tape::new();
                    let tp = TapeParams::register(&mut tape, &params);
                    let zv = tape.leaf(z_t);
                    let ev = tape.leaf(eps);
                    let pred = denoise_on_tape(&mut tape, &tp, config, zv, t)?;
                    let loss = tape.mse_loss(pred, ev)?;
                    Ok(loss_and_grads(&tape, &tp, loss)?)
                })
                .collect();
            let mut grad_sets = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) =
                    r.map_err(|e| DiffusionError::Training(format!("epoch {epoch}: {e}")))?;
                epoch_loss += l;
                grad_sets.push(g);
            }
            let mean_grads = average_grads(grad_sets)?;
            opt.step(&mut params, &mean_grads)?;
            if !params.all_finite() {
                return Err(DiffusionError::Training(format!(
                    "non-finite parameters after update in epoch {epoch}"
                )));
            }
        }
        loss_curve.push(epoch_loss / latents.len() as f64);
    }
    Ok(DenoiserTrainOutcome {
        params: DenoiserParams(params),
        loss_curve,
    })
}

/// Mean epsilon-prediction loss at fixed parameters (no updates).
pub fn eval_denoiser_loss(
    params: &DenoiserParams,
    config: &DiffusionConfig,
    latents: &[Tensor],
    schedule: &VarianceSchedule,
    seed: u64,
    draws_per_latent: usize,
) -> Result<f64, DiffusionError> {
    let mut total = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE7A1));
    for z0 in latents {
        for _ in 0..draws_per_latent {
            let t = rng.gen_range(1..=config.t_steps);
            let eps = randn_like(&config.latent_shape, &mut rng);
            let z_t = schedule.q_sample(z0, t, &eps)?;
            let pred = predict_noise(params, config, &z_t, t)?;
            let n = eps.numel() as f64;
            total += pred
                .data()
                .iter()
                .zip(eps.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
        }
    }
    Ok(total / (latents.len() * draws_per_latent) as f64)
}

/// One ancestral reverse step; noise is injected for t > 1 only.
pub fn p_sample_step(
    params: &DenoiserParams,
    config: &DiffusionConfig,
    z_t: &Tensor,
    t: usize,
    schedule: &VarianceSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, DiffusionError> {
    if t == 0 || t > schedule.len() {
        return Err(DiffusionError::Schedule(format!(
            "t={t} out of range 1..={}",
            schedule.len()
        )));
    }
    let eps_hat = predict_noise(params, config, z_t, t)?;
    posterior_mean_step(z_t, &eps_hat, t, schedule, Some(rng))
}

/// Reverse-step mean given a noise estimate, plus optional injected noise.
/// Exposed separately so oracle denoisers can drive it in tests.
pub fn posterior_mean_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &VarianceSchedule,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor, DiffusionError> {
    if z_t.shape() != eps_hat.shape() {
        return Err(DiffusionError::Shape(format!(
            "noise estimate shape {:?} vs latent {:?}",
            eps_hat.shape(),
            z_t.shape()
        )));
    }
    let beta = schedule.beta(t);
    let alpha = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let coef = beta / (1.0 - ab).sqrt();
    let mut data: Vec<f64> = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(z, e)| inv_sqrt_alpha * (z - coef * e))
        .collect();
    if t > 1 {
        if let Some(rng) = rng {
            let sigma = beta.sqrt();
            for v in &mut data {
                let n: f64 = rng.sample(StandardNormal);
                *v += sigma * n;
            }
        }
    }
    Ok(Tensor::new(z_t.shape().to_vec(), data).expect("shape preserved"))
}

/// Ancestral sampling: z_T ~ N(0, I), T reverse steps, then
/// de-standardization. Per-sample RNG streams make parallel and serial
/// generation identical.
pub fn generate(
    params: &DenoiserParams,
    config: &DiffusionConfig,
    schedule: &VarianceSchedule,
    stats: &LatentStats,
    count: usize,
    seed: u64,
) -> Result<Vec<Tensor>, DiffusionError> {
    if count == 0 {
        return Err(DiffusionError::Config("count must be >= 1".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5A17 ^ i as u64));
            let mut z = randn_like(&config.latent_shape, &mut rng);
            for t in (1..=schedule.len()).rev() {
                z = p_sample_step(params, config, &z, t, schedule, &mut rng)?;
            }
            Ok(stats.destandardize(&z))
        })
        .collect()
}
