use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("timestep {t} outside [{min}, {max}]")]
    Timestep { t: usize, min: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    #[error(
        "training diverged at iteration {iteration} (t={t}, k={k}, cond_rate={cond_rate}): {detail}"
    )]
    Diverged {
        iteration: u64,
        t: usize,
        k: usize,
        cond_rate: f64,
        detail: String,
    },

    #[error("sampling produced non-finite values at step index {step_index} (timestep {timestep})")]
    SamplingDiverged { step_index: usize, timestep: usize },

    #[error("relaxation did not converge within {max_sweeps} sweeps")]
    NonConvergence { max_sweeps: usize },

    #[error("dataset error:\n{}", .0.join("\n"))]
    Dataset(Vec<String>),

    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, detail: impl ToString) -> Self {
        Error::Format {
            context: context.into(),
            detail: detail.to_string(),
        }
    }
}
