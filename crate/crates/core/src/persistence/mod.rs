//! Run configuration, checkpoints and sample files.

mod checkpoint;
mod config;
mod samples;

pub use checkpoint::{checkpoint_id, Checkpoint, ModelRole, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ArchKind, RunConfig};
pub use samples::{SampleFile, SampleHeader, SAMPLE_MAGIC};
