//! Pipeline stages: each writes its outputs plus a manifest entry keyed by
//! the hash of the config slice it depends on; re-running a completed
//! stage with an identical hash is a no-op unless forced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use memaud_core::audit::{
    build_report, calibrate_threshold, copy_candidates, validation_baseline,
};
use memaud_core::autoencoder::{self, AutoencoderParams};
use memaud_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use memaud_core::contrastive::{self, EmbedderParams, EmbeddingTable};
use memaud_core::diffusion::{self, DenoiserParams, LatentStats};
use memaud_core::nn;
use memaud_core::volumes::{
    generate_phantoms, load_volume, random_augment, save_volume, DatasetManifest, ManifestEntry,
    Split, Volume,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{hash_json, RunConfig};
use crate::CliError;

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub outputs: Vec<PathBuf>,
    pub wall_secs: f64,
}

/// Per-run bookkeeping: effective config echo plus one record per
/// completed stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(data_dir: &Path) -> Self {
        let path = data_dir.join(MANIFEST_FILE);
        std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    /// Atomic save: write a temporary file, then rename into place.
    pub fn save(&self, data_dir: &Path) -> Result<(), CliError> {
        let path = data_dir.join(MANIFEST_FILE);
        let tmp = data_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

pub struct Runner {
    pub config: RunConfig,
    pub force: bool,
    manifest: RunManifest,
}

impl Runner {
    pub fn new(config: RunConfig, force: bool) -> Result<Self, CliError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let mut manifest = RunManifest::load(&config.data_dir);
        manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
        manifest.config = config.effective_json();
        Ok(Self {
            config,
            force,
            manifest,
        })
    }

    fn dir(&self, sub: &str) -> Result<PathBuf, CliError> {
        let d = self.config.data_dir.join(sub);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    /// True when the stage is already complete under this hash and all its
    /// recorded outputs still exist.
    fn cached(&self, stage: &str, hash: &str) -> bool {
        if self.force {
            return false;
        }
        match self.manifest.stages.get(stage) {
            Some(rec) => {
                rec.config_hash == hash
                    && rec
                        .outputs
                        .iter()
                        .all(|p| self.config.data_dir.join(p).exists())
            }
            None => false,
        }
    }

    fn record(
        &mut self,
        stage: &str,
        hash: String,
        outputs: Vec<PathBuf>,
        started: Instant,
    ) -> Result<(), CliError> {
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                config_hash: hash,
                outputs,
                wall_secs: started.elapsed().as_secs_f64(),
            },
        );
        self.manifest.save(&self.config.data_dir)
    }

    fn stage_hash(&self, stage: &str, upstream: &[&str]) -> Result<String, CliError> {
        let c = &self.config;
        let slice = match stage {
            "phantom" => json!({
                "seed": c.phantom_seed(),
                "dims": c.dims,
                "train_count": c.train_count,
                "val_count": c.val_count,
                "phantom": c.phantom,
            }),
            "train-ae" => json!({"autoencoder": c.autoencoder}),
            "train-diff" => json!({"diffusion": c.diffusion}),
            "train-con" => json!({"embedder": c.embedder}),
            "generate" => json!({
                "seed": c.generate_seed(),
                "count": c.synth_multiplier * c.train_count,
            }),
            "audit" => json!({
                "quantile": c.quantile,
                "bins": c.histogram_bins,
            }),
            other => return Err(CliError::Config(format!("unknown stage {other}"))),
        };
        let mut up = serde_json::Map::new();
        for s in upstream {
            let rec = self.manifest.stages.get(*s).ok_or_else(|| {
                CliError::Missing(format!("stage '{stage}' requires '{s}' to run first"))
            })?;
            up.insert(s.to_string(), json!(rec.config_hash));
        }
        Ok(hash_json(&json!({"stage": stage, "config": slice, "upstream": up})))
    }

    fn load_split(&self, split: Split) -> Result<Vec<Volume>, CliError> {
        let path = self.config.data_dir.join("dataset.json");
        if !path.is_file() {
            return Err(CliError::Missing(format!(
                "dataset manifest {} not found; run `memaud phantom` first",
                path.display()
            )));
        }
        let manifest = DatasetManifest::load(&path)?;
        manifest.validate(&self.config.data_dir)?;
        manifest
            .split_entries(split)
            .map(|e| Ok(load_volume(&self.config.data_dir.join(&e.path))?))
            .collect()
    }

    fn load_ckpt(&self, name: &str, hint: &str) -> Result<Checkpoint, CliError> {
        let path = self.config.data_dir.join("checkpoints").join(name);
        if !path.is_file() {
            return Err(CliError::Missing(format!(
                "checkpoint {} not found; run `memaud {hint}` first",
                path.display()
            )));
        }
        Ok(load_checkpoint(&path)?)
    }

    pub fn phantom(&mut self) -> Result<(), CliError> {
        let hash = self.stage_hash("phantom", &[])?;
        if self.cached("phantom", &hash) {
            println!("phantom: up to date ({hash})");
            return Ok(());
        }
        let t0 = Instant::now();
        let c = &self.config;
        let total = c.train_count + c.val_count;
        let volumes = generate_phantoms(c.phantom_seed(), total, c.dims, &c.phantom)?;
        let vol_dir = self.dir("volumes")?;
        let mut entries = Vec::with_capacity(total);
        for (i, v) in volumes.iter().enumerate() {
            let rel = PathBuf::from("volumes").join(format!("{}.vol", v.id));
            save_volume(v, &vol_dir.join(format!("{}.vol", v.id)))?;
            entries.push(ManifestEntry {
                id: v.id.clone(),
                path: rel,
                split: if i < c.train_count {
                    Split::Train
                } else {
                    Split::Val
                },
            });
        }
        let dataset = DatasetManifest {
            seed: c.phantom_seed(),
            created: format!("config-{hash}"),
            entries,
        };
        let dataset_path = self.config.data_dir.join("dataset.json");
        dataset.save(&dataset_path)?;
        let mut outputs = vec![PathBuf::from("dataset.json")];
        outputs.extend(dataset.entries.iter().map(|e| e.path.clone()));
        println!("phantom: wrote {} volumes ({hash})", total);
        self.record("phantom", hash, outputs, t0)
    }

    pub fn train_ae(&mut self) -> Result<(), CliError> {
        let hash = self.stage_hash("train-ae", &["phantom"])?;
        if self.cached("train-ae", &hash) {
            println!("train-ae: up to date ({hash})");
            return Ok(());
        }
        let t0 = Instant::now();
        let train = self.load_split(Split::Train)?;
        let cfg = self.config.autoencoder.clone();
        let out = autoencoder::train_autoencoder(&cfg, &train)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let final_loss = *out.loss_curve.last().expect("at least one epoch");
        let ckpt_dir = self.dir("checkpoints")?;
        save_checkpoint(
            &ckpt_dir.join("ae.ckpt"),
            "autoencoder",
            serde_json::to_value(&cfg).expect("config serializes"),
            cfg.epochs,
            final_loss,
            &out.params.0,
        )?;
        println!("train-ae: final training loss {final_loss:.4} ({hash})");
        self.record(
            "train-ae",
            hash,
            vec![PathBuf::from("checkpoints/ae.ckpt")],
            t0,
        )
    }

    pub fn train_diff(&mut self) -> Result<(), CliError> {
        let hash = self.stage_hash("train-diff", &["train-ae"])?;
        if self.cached("train-diff", &hash) {
            println!("train-diff: up to date ({hash})");
            return Ok(());
        }
        let t0 = Instant::now();
        let ae = self.load_ckpt("ae.ckpt", "train-ae")?;
        let ae_params = AutoencoderParams(ae.params);
        let train = self.load_split(Split::Train)?;
        let cfg = self.config.diffusion.clone();
        // with augmentation the diffusion model trains on latents of
        // oriented copies, not just the stored orientation; this is what
        // enlarges its effective dataset relative to the plain arm
        let orientations_per_volume = if self.config.augment_ldm {
            self.config.augment_orientations.max(1)
        } else {
            1
        };
        let mut aug_rng =
            ChaCha8Rng::seed_from_u64(nn::derive_seed(self.config.diffusion.seed, 0xA06));
        let mut sources: Vec<Volume> = Vec::with_capacity(train.len() * orientations_per_volume);
        for v in &train {
            sources.push(v.clone());
            for _ in 1..orientations_per_volume {
                sources.push(random_augment(v, &mut aug_rng).0);
            }
        }
        let latents = sources
            .iter()
            .map(|v| autoencoder::encode(&ae_params, &self.config.autoencoder, &v.to_tensor()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let stats =
            LatentStats::compute(&latents).map_err(|e| CliError::Numerical(e.to_string()))?;
        let standardized: Vec<_> = latents.iter().map(|z| stats.standardize(z)).collect();
        let schedule = cfg.schedule().map_err(|e| CliError::Config(e.to_string()))?;
        let out = diffusion::train_denoiser(&cfg, &standardized, &schedule)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let final_loss = *out.loss_curve.last().expect("at least one epoch");
        let ckpt_dir = self.dir("checkpoints")?;
        // the latent statistics ride along in the checkpoint header so the
        // generate stage can de-standardize without re-reading the corpus
        save_checkpoint(
            &ckpt_dir.join("diff.ckpt"),
            "denoiser",
            json!({"diffusion": cfg, "latent_stats": stats}),
            cfg.epochs,
            final_loss,
            &out.params.0,
        )?;
        println!("train-diff: final training loss {final_loss:.4} ({hash})");
        self.record(
            "train-diff",
            hash,
            vec![PathBuf::from("checkpoints/diff.ckpt")],
            t0,
        )
    }

    pub fn train_con(&mut self) -> Result<(), CliError> {
        let hash = self.stage_hash("train-con", &["phantom"])?;
        if self.cached("train-con", &hash) {
            println!("train-con: up to date ({hash})");
            return Ok(());
        }
        let t0 = Instant::now();
        let train = self.load_split(Split::Train)?;
        let val = self.load_split(Split::Val)?;
        let cfg = self.config.embedder.clone();
        let out = contrastive::train_embedder(&cfg, &train, &val)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let val_acc = out.val_accuracy_curve[out.best_epoch];
        let ckpt_dir = self.dir("checkpoints")?;
        save_checkpoint(
            &ckpt_dir.join("con.ckpt"),
            "embedder",
            serde_json::to_value(&cfg).expect("config serializes"),
            out.best_epoch,
            *out.loss_curve.last().expect("at least one epoch"),
            &out.params.0,
        )?;
        println!(
            "train-con: best epoch {} validation accuracy {val_acc:.4} ({hash})",
            out.best_epoch
        );
        self.record(
            "train-con",
            hash,
            vec![PathBuf::from("checkpoints/con.ckpt")],
            t0,
        )
    }

    pub fn generate(&mut self) -> Result<(), CliError> {
        let hash = self.stage_hash("generate", &["train-ae", "train-diff"])?;
        if self.cached("generate", &hash) {
            println!("generate: up to date ({hash})");
            return Ok(());
        }
        let t0 = Instant::now();
        let ae = self.load_ckpt("ae.ckpt", "train-ae")?;
        let ae_params = AutoencoderParams(ae.params);
        let diff = self.load_ckpt("diff.ckpt", "train-diff")?;
        let stats: LatentStats =
            serde_json::from_value(diff.header.config["latent_stats"].clone())
                .map_err(|e| CliError::Missing(format!("diff.ckpt lacks latent stats: {e}")))?;
        let cfg = self.config.diffusion.clone();
        let schedule = cfg.schedule().map_err(|e| CliError::Config(e.to_string()))?;
        let count = self.config.synth_multiplier * self.config.train_count;
        let latents = diffusion::generate(
            &DenoiserParams(diff.params),
            &cfg,
            &schedule,
            &stats,
            count,
            self.config.generate_seed(),
        )
        .map_err(|e| CliError::Numerical(e.to_string()))?;
        let synth_dir = self.dir("synth")?;
        let mut entries = Vec::with_capacity(count);
        for (i, z) in latents.iter().enumerate() {
            let x = autoencoder::decode(&ae_params, &self.config.autoencoder, z)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            let v = Volume::from_tensor(format!("synth_{i:04}"), &x)?;
            let rel = PathBuf::from("synth").join(format!("{}.vol", v.id));
            save_volume(&v, &synth_dir.join(format!("{}.vol", v.id)))?;
            entries.push(ManifestEntry {
                id: v.id,
                path: rel,
                split: Split::Train,
            });
        }
        let listing = DatasetManifest {
            seed: self.config.generate_seed(),
            created: format!("config-{hash}"),
            entries,
        };
        listing.save(&self.config.data_dir.join("synth.json"))?;
        let mut outputs = vec![PathBuf::from("synth.json")];
        outputs.extend(listing.entries.iter().map(|e| e.path.clone()));
        println!("generate: wrote {count} synthetic volumes ({hash})");
        self.record("generate", hash, outputs, t0)
    }

    pub fn audit(&mut self) -> Result<(), CliError> {
        let hash = self.stage_hash("audit", &["train-con", "generate"])?;
        if self.cached("audit", &hash) {
            println!("audit: up to date ({hash})");
            return Ok(());
        }
        let t0 = Instant::now();
        let report = self.run_audit(&format!("config-{hash}"))?;
        let reports = self.dir("reports")?;
        std::fs::write(
            reports.join("audit.json"),
            serde_json::to_string_pretty(&report.to_json()).expect("report serializes"),
        )?;
        std::fs::write(reports.join("audit.csv"), report.to_csv())?;
        println!(
            "audit: copy rate {:.4} at tau {:.6} ({hash})",
            report.copy_rate, report.tau
        );
        self.record(
            "audit",
            hash,
            vec![
                PathBuf::from("reports/audit.json"),
                PathBuf::from("reports/audit.csv"),
            ],
            t0,
        )
    }

    /// Shared audit core: embed train/val/synth, scan, threshold, report.
    pub fn run_audit(
        &self,
        created: &str,
    ) -> Result<memaud_core::audit::AuditReport, CliError> {
        let synth_path = self.config.data_dir.join("synth.json");
        if !synth_path.is_file() {
            return Err(CliError::Missing(format!(
                "synthetic listing {} not found; run `memaud generate` first",
                synth_path.display()
            )));
        }
        let listing = DatasetManifest::load(&synth_path)?;
        listing.validate(&self.config.data_dir)?;
        let synth: Vec<Volume> = listing
            .entries
            .iter()
            .map(|e| Ok(load_volume(&self.config.data_dir.join(&e.path))?))
            .collect::<Result<_, CliError>>()?;
        let con = self.load_ckpt("con.ckpt", "train-con")?;
        let params = EmbedderParams(con.params);
        let cfg = &self.config.embedder;
        let train = self.load_split(Split::Train)?;
        let val = self.load_split(Split::Val)?;
        let embed = |vols: &[Volume]| -> Result<EmbeddingTable, CliError> {
            contrastive::embed_all(&params, cfg, vols, created)
                .map_err(|e| CliError::Numerical(e.to_string()))
        };
        let train_table = embed(&train)?;
        let val_table = embed(&val)?;
        let synth_table = embed(&synth)?;
        let candidates = copy_candidates(&train_table, &synth_table)?;
        let baseline = validation_baseline(&train_table, &val_table)?;
        let baseline_msds: Vec<f64> = baseline.iter().map(|(_, _, d)| *d).collect();
        let tau = calibrate_threshold(&baseline_msds, self.config.quantile)?;
        Ok(build_report(
            &candidates,
            &baseline,
            tau,
            self.config.quantile,
            self.config.histogram_bins,
            None,
            self.config.effective_json(),
            vec![self.config.seed],
        )?)
    }
}

/// Per-seed result of the augmented vs non-augmented comparison. The tau
/// and candidate MSDs are kept so near-threshold outcomes can be judged
/// without rerunning the arms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub seed: u64,
    pub copy_rate_aug: f64,
    pub copy_rate_noaug: f64,
    pub tau: f64,
    pub candidate_msds_aug: Vec<f64>,
    pub candidate_msds_noaug: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: serde_json::Value,
    pub copy_rate_aug: f64,
    pub copy_rate_noaug: f64,
    pub per_seed: Vec<ExperimentRow>,
}

/// The two-arm comparison: per seed pair, one phantom corpus and one
/// detector are shared, while the LDM (autoencoder + diffusion) trains
/// with and without augmentation; both synthetic pools are audited with
/// the shared detector.
pub fn experiment(config: &RunConfig, seeds: u64, force: bool) -> Result<ExperimentReport, CliError> {
    if seeds == 0 {
        return Err(CliError::Config("need at least 1 seed".into()));
    }
    let mut rows = Vec::with_capacity(seeds as usize);
    for i in 0..seeds {
        let pair_seed = config.seed.wrapping_add(i);
        let mut arm_rates = [0.0f64; 2];
        let mut arm_msds: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut tau = 0.0f64;
        for (slot, augment) in [(0usize, true), (1usize, false)] {
            let arm = if augment { "aug" } else { "noaug" };
            let arm_dir = config
                .data_dir
                .join("experiment")
                .join(format!("seed_{pair_seed}"))
                .join(arm);
            let arm_config = config.arm(arm_dir, pair_seed, augment)?;
            let mut runner = Runner::new(arm_config, force)?;
            runner.phantom()?;
            // the detector is augmentation-independent: share the aug
            // arm's corpus and embedder with the noaug arm
            if augment {
                runner.train_con()?;
            } else {
                let src = config
                    .data_dir
                    .join("experiment")
                    .join(format!("seed_{pair_seed}"))
                    .join("aug");
                std::fs::create_dir_all(runner.config.data_dir.join("checkpoints"))?;
                std::fs::copy(
                    src.join("checkpoints/con.ckpt"),
                    runner.config.data_dir.join("checkpoints/con.ckpt"),
                )?;
            }
            runner.train_ae()?;
            runner.train_diff()?;
            runner.generate()?;
            let report = runner.run_audit(&format!("experiment-seed-{pair_seed}-{arm}"))?;
            arm_rates[slot] = report.copy_rate;
            arm_msds[slot] = report.records.iter().map(|r| r.msd).collect();
            tau = report.tau;
            println!(
                "experiment seed {pair_seed} {arm}: copy rate {:.4}",
                report.copy_rate
            );
        }
        let [msds_aug, msds_noaug] = arm_msds;
        rows.push(ExperimentRow {
            seed: pair_seed,
            copy_rate_aug: arm_rates[0],
            copy_rate_noaug: arm_rates[1],
            tau,
            candidate_msds_aug: msds_aug,
            candidate_msds_noaug: msds_noaug,
        });
    }
    let n = rows.len() as f64;
    let report = ExperimentReport {
        config: config.effective_json(),
        copy_rate_aug: rows.iter().map(|r| r.copy_rate_aug).sum::<f64>() / n,
        copy_rate_noaug: rows.iter().map(|r| r.copy_rate_noaug).sum::<f64>() / n,
        per_seed: rows,
    };
    let reports = config.data_dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    std::fs::write(
        reports.join("experiment.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok(report)
}
