use ndarray::Array2;

use crate::error::{Error, Result};

const MAX_PERIOD: f64 = 10_000.0;

/// Sinusoidal timestep features at geometric frequencies
/// `MAX_PERIOD^(-i / half)`, laid out as `[sin..., cos...]`.
///
/// The first frequency is one radian per step, so distinct integer timesteps
/// always map to distinct vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeEmbedding {
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time embedding dimension must be even and >= 2, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, t: usize) -> Vec<f64> {
        let half = self.dim / 2;
        let t = t as f64;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp())
            .collect();
        freqs
            .iter()
            .map(|w| (t * w).sin())
            .chain(freqs.iter().map(|w| (t * w).cos()))
            .collect()
    }

    /// The encoding of `t` repeated on every row.
    pub fn encode_batch(&self, t: usize, batch: usize) -> Array2<f64> {
        let row = self.encode(t);
        Array2::from_shape_fn((batch, self.dim), |(_, j)| row[j])
    }
}
