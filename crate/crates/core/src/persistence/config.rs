//! Flat key-value run configuration. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{DatasetKind, DatasetSpec, ImageShape};
use crate::denoiser::{Architecture, ConvSpec, MlpSpec};
use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::schedule::{ScheduleKind, ScheduleParams};
use crate::trainer::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    #[default]
    Mlp,
    Conv,
}

/// Every key a config file may set, with its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub ema_decay: f64,
    pub graph_sync_interval: u64,
    pub loss_variant: LossVariant,
    pub relax_enabled: bool,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub dataset: DatasetKind,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    /// Seed of the held-out reference set used by evaluation.
    pub reference_seed: u64,
    pub image_dir: Option<PathBuf>,
    pub architecture: ArchKind,
    /// Hidden layer widths (mlp) or channel counts (conv).
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    /// Write a log line every this many iterations.
    pub log_interval: u64,
    /// Write a checkpoint every this many iterations; 0 writes only the last.
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let schedule = ScheduleParams::default();
        Self {
            seed: train.seed,
            iterations: train.total_iterations,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            optimizer: train.optimizer,
            lambda: train.lambda,
            ema_decay: train.ema_decay,
            graph_sync_interval: train.graph_sync_interval,
            loss_variant: train.loss_variant,
            relax_enabled: train.relax_enabled,
            timesteps: schedule.timesteps,
            beta_start: schedule.beta_start,
            beta_end: schedule.beta_end,
            schedule: schedule.kind,
            dataset: DatasetKind::GaussianMixture8,
            dataset_size: 10_000,
            dataset_seed: 1,
            reference_seed: 2,
            image_dir: None,
            architecture: ArchKind::Mlp,
            hidden_dims: vec![128, 128],
            embed_dim: 32,
            log_interval: 1,
            checkpoint_interval: 0,
        }
    }
}

fn known_keys() -> Vec<String> {
    match toml::Value::try_from(RunConfig::default()) {
        Ok(toml::Value::Table(t)) => {
            let mut keys: Vec<String> = t.keys().cloned().collect();
            keys.push("image_dir".into());
            keys
        }
        _ => Vec::new(),
    }
}

impl RunConfig {
    /// Parses config text, reporting every unknown key, type error and
    /// invalid value at once.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("unparsable config: {e}")))?;
        let known = known_keys();
        let mut problems = Vec::new();
        for (key, value) in &table {
            if !known.contains(key) {
                problems.push(format!("unknown key `{key}`"));
                continue;
            }
            let mut single = toml::Table::new();
            single.insert(key.clone(), value.clone());
            if let Err(e) = RunConfig::deserialize(toml::Value::Table(single)) {
                problems.push(format!("key `{key}`: {}", e.message().trim()));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("\n")));
        }
        let cfg = RunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e))
    }

    /// First 12 hex digits of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes()))[..12].to_string())
    }

    /// All semantic problems, one per line.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(m)) = self.train_config().validate() {
            problems.push(m);
        }
        if let Err(e) = self.schedule_params().build() {
            problems.push(e.to_string());
        }
        if self.timesteps < 2 {
            problems.push(format!("timesteps must be >= 2 for training, got {}", self.timesteps));
        }
        if self.iterations > 0 && self.dataset_size == 0 {
            problems.push("dataset_size must be positive".into());
        }
        if self.dataset == DatasetKind::TinyImagesDir && self.image_dir.is_none() {
            problems.push("dataset tiny_images_dir needs image_dir".into());
        }
        if self.dataset != DatasetKind::TinyImagesDir && self.architecture == ArchKind::Conv {
            problems.push("architecture conv needs an image dataset".into());
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            problems.push("hidden_dims must be a nonempty list of positive widths".into());
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            problems.push(format!("embed_dim must be even and >= 2, got {}", self.embed_dim));
        }
        if self.log_interval == 0 {
            problems.push("log_interval must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            ema_decay: self.ema_decay,
            graph_sync_interval: self.graph_sync_interval,
            total_iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            loss_variant: self.loss_variant,
            optimizer: self.optimizer,
            relax_enabled: self.relax_enabled,
        }
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            timesteps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            kind: self.schedule,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.dataset,
            n: self.dataset_size,
            seed: self.dataset_seed,
            image_dir: self.image_dir.clone(),
        }
    }

    /// Same source, held-out seed.
    pub fn reference_spec(&self, n: usize) -> DatasetSpec {
        DatasetSpec {
            n,
            seed: self.reference_seed,
            ..self.dataset_spec()
        }
    }

    pub fn architecture_for(&self, dims: usize, image: Option<ImageShape>) -> Result<Architecture> {
        let arch = match (self.architecture, image) {
            (ArchKind::Mlp, _) => Architecture::Mlp(MlpSpec {
                input_dim: dims,
                hidden_dims: self.hidden_dims.clone(),
                embed_dim: self.embed_dim,
            }),
            (ArchKind::Conv, Some(shape)) => Architecture::Conv(ConvSpec {
                channels: shape.channels,
                height: shape.height,
                width: shape.width,
                hidden_channels: self.hidden_dims.clone(),
                embed_dim: self.embed_dim,
            }),
            (ArchKind::Conv, None) => {
                return Err(Error::Config("architecture conv needs an image dataset".into()))
            }
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.hash().unwrap().len(), 12);
    }

    #[test]
    fn every_problem_is_listed() {
        let text = "seed = 3\nlearnig_rate = 0.1\nbatch_size = \"big\"\ncolour = 1\n";
        let msg = RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(msg.contains("learnig_rate"), "{msg}");
        assert!(msg.contains("colour"), "{msg}");
        assert!(msg.contains("batch_size"), "{msg}");
    }

    #[test]
    fn semantic_problems_are_listed() {
        let text = "ema_decay = 2.0\nembed_dim = 3\ntimesteps = 1\n";
        let msg = RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(msg.contains("ema_decay"), "{msg}");
        assert!(msg.contains("embed_dim"), "{msg}");
        assert!(msg.contains("timesteps"), "{msg}");
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = RunConfig::from_toml_str("iterations = 5\noptimizer = \"adam\"\n").unwrap();
        assert_eq!(cfg.iterations, 5);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.batch_size, RunConfig::default().batch_size);
    }
}
