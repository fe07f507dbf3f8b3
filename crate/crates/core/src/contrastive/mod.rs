//! Self-supervised copy detector: a conv trunk plus two dense layers maps
//! volumes to 32-component embeddings, trained with a triplet objective so
//! flipped/rotated copies of a volume land close together and distinct
//! volumes land apart.

mod table;

pub use table::EmbeddingTable;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::LEAKY_SLOPE;
use crate::nn::{
    average_grads, derive_seed, init_tensor, init_tensor_gain, loss_and_grads, TapeParams,
};
use crate::numerics::{AdamConfig, AdamState, NumericsError, ParamSet, Tape, Tensor, VarId};
use crate::volumes::{random_augment, Orientation, Volume};

pub const EMBED_DIM: usize = 32;

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dims: [usize; 3],
    /// Conv trunk downsample factor (power of 2); trunk geometry mirrors
    /// the autoencoder encoder.
    pub downsample: usize,
    pub trunk_channels: Vec<usize>,
    pub latent_channels: usize,
    pub dense_hidden: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Optional low-rate refinement phase after the main epochs: the
    /// optimizer restarts with `fine_tune_learning_rate`, which contracts
    /// intra-orbit spread without the scale drift a fixed margin causes at
    /// the main rate. 0 disables the phase.
    #[serde(default)]
    pub fine_tune_epochs: usize,
    #[serde(default = "default_fine_tune_lr")]
    pub fine_tune_learning_rate: f64,
    /// Decoupled weight decay; counters the unbounded embedding-scale
    /// growth a fixed triplet margin otherwise causes, which keeps the
    /// hinge active on hard pairs throughout training.
    #[serde(default)]
    pub weight_decay: f64,
    /// Present each negative in a random orientation rather than raw.
    /// The nearest-neighbor audit compares augmented queries against raw
    /// source embeddings, so cross-orbit proximity under orientation is
    /// the failure mode that matters; augmented negatives penalize that
    /// distance directly instead of via the triangle inequality.
    #[serde(default)]
    pub augment_negatives: bool,
    pub batch_size: usize,
    pub seed: u64,
}

fn default_fine_tune_lr() -> f64 {
    1e-4
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dims: [16, 16, 16],
            downsample: 4,
            trunk_channels: vec![16],
            latent_channels: 8,
            dense_hidden: 64,
            margin: 0.0,
            learning_rate: 1e-3,
            epochs: 40,
            fine_tune_epochs: 0,
            fine_tune_learning_rate: 1e-4,
            weight_decay: 0.0,
            augment_negatives: false,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    fn flat_dim(&self) -> usize {
        let s = self.downsample;
        self.latent_channels * (self.dims[0] / s) * (self.dims[1] / s) * (self.dims[2] / s)
    }

    pub fn validate(&self) -> Result<(), ContrastiveError> {
        if !self.downsample.is_power_of_two() || self.downsample < 2 {
            return Err(ContrastiveError::Config(format!(
                "downsample must be a power of 2 >= 2, got {}",
                self.downsample
            )));
        }
        if self.dims.iter().any(|d| d % self.downsample != 0) {
            return Err(ContrastiveError::Config(format!(
                "dims {:?} not divisible by downsample {}",
                self.dims, self.downsample
            )));
        }
        if self.trunk_channels.len() + 1 != self.stages() {
            return Err(ContrastiveError::Config(format!(
                "expected {} trunk channel widths, got {}",
                self.stages() - 1,
                self.trunk_channels.len()
            )));
        }
        if self.margin < 0.0 {
            return Err(ContrastiveError::Config("margin must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderParams(pub ParamSet);

pub fn init_embedder(config: &EmbedderConfig) -> Result<EmbedderParams, ContrastiveError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xC0));
    let mut p = ParamSet::new();
    let mut seq = vec![1usize];
    seq.extend(&config.trunk_channels);
    seq.push(config.latent_channels);
    for s in 0..config.stages() {
        let (cin, cout) = (seq[s], seq[s + 1]);
        // Kernel 4 / stride 2 / pad 1: this sampling grid maps onto itself
        // under axis flips and swaps, so orientation-equivariant features
        // are representable. The sqrt(2) gain keeps deep trunks from
        // attenuating activations below the embedding-variance floor at
        // initialization.
        p.insert(
            &format!("trunk.{s}.k"),
            init_tensor_gain(
                &mut rng,
                &[cout, cin, 4, 4, 4],
                cin * 64,
                std::f64::consts::SQRT_2,
            ),
        );
        p.insert(&format!("trunk.{s}.b"), Tensor::zeros(&[cout]));
    }
    let flat = config.flat_dim();
    p.insert(
        "head.0.w",
        init_tensor(&mut rng, &[config.dense_hidden, flat], flat),
    );
    p.insert("head.0.b", Tensor::zeros(&[config.dense_hidden]));
    p.insert(
        "head.1.w",
        init_tensor(
            &mut rng,
            &[EMBED_DIM, config.dense_hidden],
            config.dense_hidden,
        ),
    );
    p.insert("head.1.b", Tensor::zeros(&[EMBED_DIM]));
    Ok(EmbedderParams(p))
}

pub fn embed_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    config: &EmbedderConfig,
    x: VarId,
) -> Result<VarId, NumericsError> {
    let mut h = x;
    for s in 0..config.stages() {
        h = tape.conv3d(h, tp.var(&format!("trunk.{s}.k")), 2, 1)?;
        h = tape.add_channel_bias(h, tp.var(&format!("trunk.{s}.b")))?;
        h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    }
    h = tape.reshape(h, vec![config.flat_dim()])?;
    h = tape.dense(h, tp.var("head.0.w"), tp.var("head.0.b"))?;
    h = tape.leaky_relu(h, LEAKY_SLOPE)?;
    tape.dense(h, tp.var("head.1.w"), tp.var("head.1.b"))
}

/// Deterministic 32-component embedding of a volume.
pub fn embed(
    params: &EmbedderParams,
    config: &EmbedderConfig,
    v: &Volume,
) -> Result<Vec<f64>, ContrastiveError> {
    if v.dims != config.dims {
        return Err(ContrastiveError::Dimension(format!(
            "volume dims {:?} vs configured {:?}",
            v.dims, config.dims
        )));
    }
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, &params.0);
    let xv = tape.leaf(v.to_tensor());
    let e = embed_on_tape(&mut tape, &tp, config, xv)?;
    Ok(tape.value(e).data().to_vec())
}

/// Embed a volume list in order, parallel over volumes.
pub fn embed_all(
    params: &EmbedderParams,
    config: &EmbedderConfig,
    volumes: &[Volume],
    checkpoint_id: &str,
) -> Result<EmbeddingTable, ContrastiveError> {
    let rows: Vec<Vec<f64>> = volumes
        .par_iter()
        .map(|v| embed(params, config, v))
        .collect::<Result<_, _>>()?;
    let mut table = EmbeddingTable::new(checkpoint_id, EMBED_DIM);
    for (v, row) in volumes.iter().zip(rows) {
        table.push(v.id.clone(), &row)?;
    }
    Ok(table)
}

/// A training triplet: anchor, augmented positive, distinct negative.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub anchor: usize,
    pub negative: usize,
    pub positive: Volume,
    pub orientation: Orientation,
}

/// One triplet per anchor, anchors without replacement; the negative is a
/// uniformly drawn different volume and the positive a random orientation
/// of the anchor.
pub fn sample_triplets(
    volumes: &[Volume],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>, ContrastiveError> {
    if volumes.len() < 2 {
        return Err(ContrastiveError::Config(format!(
            "triplet sampling needs >= 2 volumes, got {}",
            volumes.len()
        )));
    }
    let mut anchors: Vec<usize> = (0..volumes.len()).collect();
    anchors.shuffle(rng);
    anchors
        .into_iter()
        .map(|a| {
            let mut n = rng.gen_range(0..volumes.len() - 1);
            if n >= a {
                n += 1;
            }
            let (positive, orientation) = random_augment(&volumes[a], rng);
            Ok(Triplet {
                anchor: a,
                negative: n,
                positive,
                orientation,
            })
        })
        .collect()
}

fn triplet_loss_and_grads(
    params: &ParamSet,
    config: &EmbedderConfig,
    anchor: &Volume,
    positive: &Volume,
    negative: &Volume,
) -> Result<(f64, ParamSet, Vec<f64>), NumericsError> {
    let mut tape = Tape::new();
    let tp = TapeParams::register(&mut tape, params);
    let av = tape.leaf(anchor.to_tensor());
    let pv = tape.leaf(positive.to_tensor());
    let nv = tape.leaf(negative.to_tensor());
    let ea = embed_on_tape(&mut tape, &tp, config, av)?;
    let ep = embed_on_tape(&mut tape, &tp, config, pv)?;
    let en = embed_on_tape(&mut tape, &tp, config, nv)?;
    let loss = tape.triplet_loss(ea, ep, en, config.margin)?;
    let (l, g) = loss_and_grads(&tape, &tp, loss)?;
    Ok((l, g, tape.value(ea).data().to_vec()))
}

/// Fraction of triplets whose positive is closer to the anchor than the
/// negative, over a fixed seeded draw from `volumes`.
pub fn triplet_accuracy(
    params: &EmbedderParams,
    config: &EmbedderConfig,
    volumes: &[Volume],
    seed: u64,
    rounds: usize,
) -> Result<f64, ContrastiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xACC));
    let mut correct = 0usize;
    let mut total = 0usize;
    for _ in 0..rounds {
        for t in sample_triplets(volumes, &mut rng)? {
            let ea = embed(params, config, &volumes[t.anchor])?;
            let ep = embed(params, config, &t.positive)?;
            let en = embed(params, config, &volumes[t.negative])?;
            let dp: f64 = ea.iter().zip(&ep).map(|(a, b)| (a - b) * (a - b)).sum();
            let dn: f64 = ea.iter().zip(&en).map(|(a, b)| (a - b) * (a - b)).sum();
            if dp < dn {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

pub struct EmbedderTrainOutcome {
    pub params: EmbedderParams,
    pub loss_curve: Vec<f64>,
    pub val_accuracy_curve: Vec<f64>,
    /// Epoch index of the returned (best-validation) parameters.
    pub best_epoch: usize,
}

const EMBED_VARIANCE_FLOOR: f64 = 1e-6;

/// Triplet training with per-epoch validation accuracy; the
/// best-validation checkpoint is returned.
pub fn train_embedder(
    config: &EmbedderConfig,
    train: &[Volume],
    val: &[Volume],
) -> Result<EmbedderTrainOutcome, ContrastiveError> {
    let init = init_embedder(config)?;
    train_embedder_from(config, init, train, val)
}

/// Triplet training starting from the given parameters (e.g. a trunk
/// warm-started from a trained autoencoder encoder).
pub fn train_embedder_from(
    config: &EmbedderConfig,
    init: EmbedderParams,
    train: &[Volume],
    val: &[Volume],
) -> Result<EmbedderTrainOutcome, ContrastiveError> {
    config.validate()?;
    if train.len() < 2 {
        return Err(ContrastiveError::Config(format!(
            "need >= 2 training volumes, got {}",
            train.len()
        )));
    }
    let mut params = init.0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xC001));
    let total_epochs = config.epochs + config.fine_tune_epochs;
    let mut loss_curve = Vec::with_capacity(total_epochs);
    let mut val_accuracy_curve = Vec::with_capacity(total_epochs);
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut phases = vec![(0..config.epochs, config.learning_rate)];
    if config.fine_tune_epochs > 0 {
        phases.push((config.epochs..total_epochs, config.fine_tune_learning_rate));
    }
    for (epoch_range, learning_rate) in phases {
        // the optimizer restarts at each phase boundary
        let mut opt = AdamState::new(
            AdamConfig {
                learning_rate,
                weight_decay: config.weight_decay,
                ..AdamConfig::default()
            },
            &params,
        );
        for epoch in epoch_range {
            let triplets = sample_triplets(train, &mut rng)?;
            let negatives: Vec<Volume> = triplets
                .iter()
                .map(|t| {
                    if config.augment_negatives {
                        random_augment(&train[t.negative], &mut rng).0
                    } else {
                        train[t.negative].clone()
                    }
                })
                .collect();
            let mut epoch_loss = 0.0;
            for (batch, batch_negatives) in triplets
                .chunks(config.batch_size.max(1))
                .zip(negatives.chunks(config.batch_size.max(1)))
            {
                let results: Vec<Result<(f64, ParamSet, Vec<f64>), NumericsError>> = batch
                    .par_iter()
                    .zip(batch_negatives.par_iter())
                    .map(|(t, negative)| {
                        triplet_loss_and_grads(&params, config, &train[t.anchor], &t.positive, negative)
                    })
                    .collect();
                let mut grad_sets = Vec::with_capacity(results.len());
                let mut embeddings = Vec::with_capacity(results.len());
                for r in results {
                    let (l, g, e) =
                        r.map_err(|e| ContrastiveError::Training(format!("epoch {epoch}: {e}")))?;
                    epoch_loss += l;
                    grad_sets.push(g);
                    embeddings.push(e);
                }
                // anti-collapse guard: batch embedding variance floor
                if embeddings.len() > 1 {
                    let d = embeddings[0].len();
                    let n = embeddings.len() as f64;
                    let mut var = 0.0;
                    for j in 0..d {
                        let mean: f64 = embeddings.iter().map(|e| e[j]).sum::<f64>() / n;
                        var += embeddings
                            .iter()
                            .map(|e| (e[j] - mean).powi(2))
                            .sum::<f64>()
                            / n;
                    }
                    if (var / d as f64) < EMBED_VARIANCE_FLOOR {
                        return Err(ContrastiveError::Training(format!(
                        "embedding variance collapsed below {EMBED_VARIANCE_FLOOR} in epoch {epoch}"
                    )));
                    }
                }
                let mean_grads = average_grads(grad_sets)?;
                opt.step(&mut params, &mean_grads)?;
                if !params.all_finite() {
                    return Err(ContrastiveError::Training(format!(
                        "non-finite parameters after update in epoch {epoch}"
                    )));
                }
            }
            loss_curve.push(epoch_loss / triplets.len() as f64);
            let snapshot = EmbedderParams(params.clone());
            let val_acc = if val.len() >= 2 {
                triplet_accuracy(&snapshot, config, val, config.seed, 2)?
            } else {
                triplet_accuracy(&snapshot, config, train, config.seed, 1)?
            };
            val_accuracy_curve.push(val_acc);
            let better = match &best {
                None => true,
                // Ties go to the later epoch: validation accuracy saturates
                // early while the margin keeps sharpening the embedding.
                Some((acc, _, _)) => val_acc >= *acc,
            };
            if better {
                best = Some((val_acc, epoch, params.clone()));
            }
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(EmbedderTrainOutcome {
        params: EmbedderParams(best_params),
        loss_curve,
        val_accuracy_curve,
        best_epoch,
    })
}
