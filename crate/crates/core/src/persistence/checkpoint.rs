//! Single-file checkpoint: magic, manifest length, JSON manifest, then raw
//! little-endian f64 arrays in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::datasets::{ImageShape, Normalization};
use crate::denoiser::{Architecture, Denoiser, ParamSet, Trainable};
use crate::error::{Error, Result};
use crate::rng::RngSnapshot;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::trainer::{BatchCursor, ModelTriplet, Optimizer, OptimizerKind, TrainRngs, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: RunConfig,
    schedule: ScheduleParams,
    architecture: Architecture,
    iteration: u64,
    optimizer: OptimizerKind,
    optimizer_steps: u64,
    rng_noise: RngSnapshot,
    rng_pairs: RngSnapshot,
    cursor: BatchCursor,
    normalization: Normalization,
    image_shape: Option<ImageShape>,
    arrays: Vec<ArrayEntry>,
}

/// Which of the three parameter sets to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Base,
    Ema,
    Graph,
}

impl ModelRole {
    pub fn name(self) -> &'static str {
        match self {
            ModelRole::Base => "base",
            ModelRole::Ema => "ema",
            ModelRole::Graph => "graph",
        }
    }
}

/// Everything needed to resume training or to sample.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub schedule: ScheduleParams,
    pub normalization: Normalization,
    pub image_shape: Option<ImageShape>,
    /// The training log is not part of a checkpoint; a restored state starts
    /// with an empty in-memory log.
    pub state: TrainState,
}

impl Checkpoint {
    pub fn model(&self, role: ModelRole) -> &Denoiser {
        let t = &self.state.triplet;
        match role {
            ModelRole::Base => &t.base,
            ModelRole::Ema => &t.ema,
            ModelRole::Graph => &t.graph,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let triplet = &self.state.triplet;
        let mut sets: Vec<(String, &ParamSet)> = vec![
            ("base".into(), triplet.base.params()),
            ("ema".into(), triplet.ema.params()),
            ("graph".into(), triplet.graph.params()),
        ];
        for (prefix, set) in self.state.optimizer.state_sets() {
            sets.push((format!("optim/{prefix}"), set));
        }
        let mut arrays = Vec::new();
        let mut data = Vec::new();
        for (prefix, set) in &sets {
            for (name, a) in set.iter() {
                arrays.push(ArrayEntry {
                    name: format!("{prefix}/{name}"),
                    shape: a.shape().to_vec(),
                });
                for v in a.iter() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            schedule: self.schedule,
            architecture: triplet.base.architecture().clone(),
            iteration: self.state.iteration,
            optimizer: self.state.optimizer.kind(),
            optimizer_steps: self.state.optimizer.steps(),
            rng_noise: RngSnapshot::capture(&self.state.rngs.noise),
            rng_pairs: RngSnapshot::capture(&self.state.rngs.pairs),
            cursor: self.state.cursor,
            normalization: self.normalization.clone(),
            image_shape: self.image_shape,
            arrays,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::format("checkpoint manifest", e))?;
        let mut out = Vec::with_capacity(8 + json.len() + data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ctx = "checkpoint";
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(ctx, "not a checkpoint file"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(8..8 + len)
            .ok_or_else(|| Error::format(ctx, "truncated manifest"))?;
        let raw: serde_json::Value =
            serde_json::from_slice(json).map_err(|e| Error::format(ctx, e))?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format(ctx, "manifest lacks format_version"))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(Error::FormatVersion {
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::format(ctx, e))?;

        let mut payload = &bytes[8 + len..];
        let mut groups: Vec<(String, Vec<(String, Vec<usize>, Vec<f64>)>)> = Vec::new();
        for entry in &m.arrays {
            let count: usize = entry.shape.iter().product();
            if payload.len() < count * 8 {
                return Err(Error::format(ctx, format!("truncated array {}", entry.name)));
            }
            let values = payload[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            payload = &payload[count * 8..];
            let (prefix, name) = entry
                .name
                .rsplit_once('/')
                .ok_or_else(|| Error::format(ctx, format!("bad array name {}", entry.name)))?;
            match groups.iter_mut().find(|(p, _)| p == prefix) {
                Some((_, items)) => items.push((name.to_string(), entry.shape.clone(), values)),
                None => groups.push((
                    prefix.to_string(),
                    vec![(name.to_string(), entry.shape.clone(), values)],
                )),
            }
        }
        if !payload.is_empty() {
            return Err(Error::format(ctx, "trailing bytes after arrays"));
        }
        let mut sets = Vec::new();
        for (prefix, items) in groups {
            sets.push((prefix, ParamSet::from_entries(items)?));
        }
        let mut take = |prefix: &str| -> Result<ParamSet> {
            let pos = sets
                .iter()
                .position(|(p, _)| p == prefix)
                .ok_or_else(|| Error::format(ctx, format!("missing {prefix} parameters")))?;
            Ok(sets.swap_remove(pos).1)
        };
        let base = Denoiser::from_params(m.architecture.clone(), take("base")?)?;
        let ema = Denoiser::from_params(m.architecture.clone(), take("ema")?)?;
        let graph = Denoiser::from_params(m.architecture.clone(), take("graph")?)?;
        let optim_sets = sets
            .into_iter()
            .filter_map(|(p, s)| p.strip_prefix("optim/").map(|n| (n.to_string(), s)))
            .collect();
        let optimizer = Optimizer::restore(
            m.optimizer,
            m.config.learning_rate,
            m.optimizer_steps,
            optim_sets,
            base.params(),
        )?;
        let state = TrainState {
            iteration: m.iteration,
            triplet: ModelTriplet::from_parts(base, ema, graph)?,
            optimizer,
            rngs: TrainRngs {
                noise: m.rng_noise.restore()?,
                pairs: m.rng_pairs.restore()?,
            },
            cursor: m.cursor,
            log: Vec::new(),
        };
        Ok(Self {
            config: m.config,
            schedule: m.schedule,
            normalization: m.normalization,
            image_shape: m.image_shape,
            state,
        })
    }

    /// Writes via a temporary file so a crash never leaves a partial file
    /// under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Content hash identifying a checkpoint file.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}
