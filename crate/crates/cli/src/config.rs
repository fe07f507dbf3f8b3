//! Run configuration: a single JSON document covering every stage, with
//! dotted-path flag overrides (flags win over the file).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use memaud_core::autoencoder::AutoencoderConfig;
use memaud_core::contrastive::EmbedderConfig;
use memaud_core::diffusion::DiffusionConfig;
use memaud_core::volumes::PhantomConfig;

use crate::CliError;

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "MEMAUD_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root directory for volumes, checkpoints, and reports.
    pub data_dir: PathBuf,
    /// Master seed; every stage seed is derived from it, and the `seed`
    /// fields inside the module configs are ignored by the CLI.
    pub seed: u64,
    pub dims: [usize; 3],
    pub train_count: usize,
    pub val_count: usize,
    /// Synthetic pool size = synth_multiplier x train_count.
    pub synth_multiplier: usize,
    /// Validation quantile for the copy threshold tau.
    pub quantile: f64,
    pub histogram_bins: usize,
    /// Train the LDM stages (autoencoder + diffusion) on augmented copies.
    pub augment_ldm: bool,
    /// When augmenting, the diffusion stage trains on latents of this many
    /// orientations per training volume (identity plus seeded random
    /// draws); 1 means identity only.
    pub augment_orientations: usize,
    pub phantom: PhantomConfig,
    pub autoencoder: AutoencoderConfig,
    pub diffusion: DiffusionConfig,
    pub embedder: EmbedderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data_dir = std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("memaud-data"));
        Self {
            data_dir,
            seed: 7,
            dims: [16, 16, 16],
            train_count: 64,
            val_count: 16,
            synth_multiplier: 4,
            quantile: 0.05,
            histogram_bins: 20,
            augment_ldm: true,
            augment_orientations: 8,
            phantom: PhantomConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            embedder: EmbedderConfig {
                margin: 1.0,
                epochs: 400,
                fine_tune_epochs: 300,
                fine_tune_learning_rate: 1e-4,
                ..EmbedderConfig::default()
            },
        }
    }
}

impl RunConfig {
    /// Load from an optional JSON file, apply `key=value` overrides, then
    /// resolve derived fields (volume dims, latent geometry, stage seeds).
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
    ) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str::<serde_json::Value>(&text)
                    .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default serializes"),
        };
        // fill any fields the file omits with defaults before overriding
        if path.is_some() {
            let mut base = serde_json::to_value(RunConfig::default()).expect("serializes");
            merge(&mut base, value);
            value = base;
        }
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let mut config: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("config field error: {e}")))?;
        config.finish()?;
        Ok(config)
    }

    /// Propagate shared geometry and derived seeds into the module configs.
    fn finish(&mut self) -> Result<(), CliError> {
        if self.train_count < 2 || self.val_count < 5 {
            return Err(CliError::Config(format!(
                "need train_count >= 2 and val_count >= 5, got {} and {}",
                self.train_count, self.val_count
            )));
        }
        if self.synth_multiplier < 1 {
            return Err(CliError::Config("synth_multiplier must be >= 1".into()));
        }
        if !(0.0 < self.quantile && self.quantile < 1.0) {
            return Err(CliError::Config(format!(
                "quantile must be in (0,1), got {}",
                self.quantile
            )));
        }
        self.autoencoder.dims = self.dims;
        self.autoencoder.augment = self.augment_ldm;
        self.embedder.dims = self.dims;
        self.diffusion.latent_shape = self.autoencoder.latent_shape();
        self.autoencoder.seed = derive(self.seed, 1);
        self.diffusion.seed = derive(self.seed, 2);
        self.embedder.seed = derive(self.seed, 3);
        self.autoencoder
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.embedder
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.diffusion
            .schedule()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Derive an experiment-arm config: new data dir and seed, toggled
    /// augmentation, with the derived fields re-resolved.
    pub fn arm(&self, data_dir: PathBuf, seed: u64, augment: bool) -> Result<Self, CliError> {
        let mut c = self.clone();
        c.data_dir = data_dir;
        c.seed = seed;
        c.augment_ldm = augment;
        c.finish()?;
        Ok(c)
    }

    pub fn phantom_seed(&self) -> u64 {
        derive(self.seed, 0)
    }

    pub fn generate_seed(&self) -> u64 {
        derive(self.seed, 4)
    }

    pub fn effective_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn derive(seed: u64, stream: u64) -> u64 {
    memaud_core::nn::derive_seed(seed, 0xC11_0000 ^ stream)
}

/// Recursive JSON merge: `overlay` wins; objects merge key-by-key.
fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply one `dotted.path=value` override; the value parses as JSON when
/// possible and falls back to a plain string.
fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' is not key=value")))?;
    let parsed = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut slot = value;
    for key in path.split('.') {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override path '{path}' is not an object")))?;
        slot = obj
            .entry(key.to_string())
            .or_insert(serde_json::Value::Null);
    }
    *slot = parsed;
    Ok(())
}

/// Short hex digest of a JSON value, used for stage caching and
/// deterministic `created` fields.
pub fn hash_json(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_string(value).expect("json serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.train_count, 64);
        assert_eq!(c.autoencoder.dims, c.dims);
        assert_eq!(c.diffusion.latent_shape, c.autoencoder.latent_shape());
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::resolve(
            None,
            &[
                "train_count=8".into(),
                "diffusion.epochs=3".into(),
                "augment_ldm=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train_count, 8);
        assert_eq!(c.diffusion.epochs, 3);
        assert!(!c.autoencoder.augment);
    }

    #[test]
    fn bad_override_rejected() {
        assert!(RunConfig::resolve(None, &["no-equals".into()]).is_err());
        assert!(RunConfig::resolve(None, &["quantile=2.0".into()]).is_err());
    }

    #[test]
    fn hash_stable_and_sensitive() {
        let a = RunConfig::resolve(None, &[]).unwrap();
        let b = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(hash_json(&a.effective_json()), hash_json(&b.effective_json()));
        let c = RunConfig::resolve(None, &["seed=8".into()]).unwrap();
        assert_ne!(hash_json(&a.effective_json()), hash_json(&c.effective_json()));
    }
}
