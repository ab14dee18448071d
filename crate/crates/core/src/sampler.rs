//! Step schedules and iterated deterministic reverse sampling from noise.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::EpsilonModel;
use crate::diffusion::{ddim_step, estimate_x0};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream_rng, Stream};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStrategy {
    #[default]
    Uniform,
    Quadratic,
    Explicit,
}

/// Visited timesteps, strictly decreasing, all in `[1, T]`. The jump to 0
/// after the last entry is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPath {
    steps: Vec<usize>,
    strategy: StepStrategy,
}

impl SamplingPath {
    pub fn explicit(steps: Vec<usize>, timesteps: usize) -> Result<Self> {
        Self::checked(steps, timesteps, StepStrategy::Explicit)
    }

    fn checked(steps: Vec<usize>, timesteps: usize, strategy: StepStrategy) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("sampling path is empty".into()));
        }
        for &k in &steps {
            if k == 0 || k > timesteps {
                return Err(Error::Timestep {
                    t: k,
                    min: 1,
                    max: timesteps,
                });
            }
        }
        if let Some(w) = steps.windows(2).find(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "sampling path must be strictly decreasing, found {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Self { steps, strategy })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn strategy(&self) -> StepStrategy {
        self.strategy
    }

    /// Network evaluations one pass along the path costs.
    pub fn nfe(&self) -> usize {
        self.steps.len()
    }
}

pub fn make_step_schedule(
    timesteps: usize,
    n_steps: usize,
    strategy: StepStrategy,
) -> Result<SamplingPath> {
    if n_steps == 0 || n_steps > timesteps {
        return Err(Error::Config(format!(
            "need 1 <= n_steps <= T, got n_steps={n_steps}, T={timesteps}"
        )));
    }
    if n_steps == 1 {
        return SamplingPath::checked(vec![timesteps], timesteps, strategy);
    }
    let span = (timesteps - 1) as f64;
    let last = (n_steps - 1) as f64;
    let frac: Box<dyn Fn(f64) -> f64> = match strategy {
        StepStrategy::Uniform => Box::new(|u| u),
        StepStrategy::Quadratic => Box::new(|u| u * u),
        StepStrategy::Explicit => {
            return Err(Error::Usage(
                "explicit paths are built with SamplingPath::explicit".into(),
            ))
        }
    };
    // ascending first, then repaired into a strictly increasing run
    let mut ks: Vec<usize> = (0..n_steps)
        .map(|i| (1.0 + span * frac(i as f64 / last)).round() as usize)
        .collect();
    for i in 1..n_steps {
        ks[i] = ks[i].max(ks[i - 1] + 1);
    }
    ks[n_steps - 1] = timesteps;
    for i in (0..n_steps - 1).rev() {
        ks[i] = ks[i].min(ks[i + 1] - 1);
    }
    ks.reverse();
    SamplingPath::checked(ks, timesteps, strategy)
}

/// Standard normal starting point drawn from the sampling stream of `seed`.
pub fn initial_noise(batch: usize, dims: usize, seed: u64) -> Array2<f64> {
    standard_normal(&mut stream_rng(seed, Stream::Sampling), batch, dims)
}

/// Iterates the reverse transition along `path` starting from `x_init`.
/// `fresh_noise` feeds the stochastic term when `sigma > 0`; the final jump
/// to step 0 is always deterministic.
pub fn sample_from<M, R>(
    model: &M,
    s: &NoiseSchedule,
    path: &SamplingPath,
    x_init: ArrayView2<f64>,
    sigma: f64,
    mut fresh_noise: Option<&mut R>,
) -> Result<Array2<f64>>
where
    M: EpsilonModel + ?Sized,
    R: Rng + ?Sized,
{
    if sigma > 0.0 && fresh_noise.is_none() {
        return Err(Error::Usage("sigma > 0 needs a noise source".into()));
    }
    let steps = path.steps();
    let mut x = x_init.to_owned();
    for (i, &k) in steps.iter().enumerate() {
        let diverged = || Error::SamplingDiverged {
            step_index: i,
            timestep: k,
        };
        let eps_hat = model.predict(x.view(), k)?;
        if eps_hat.iter().any(|v| !v.is_finite()) {
            return Err(diverged());
        }
        let x0_hat = estimate_x0(x.view(), eps_hat.view(), k, s).map_err(|_| diverged())?;
        let next = steps.get(i + 1).copied().unwrap_or(0);
        let (sig, z) = if next > 0 && sigma > 0.0 {
            let rng = fresh_noise.as_deref_mut().expect("checked above");
            (sigma, Some(standard_normal(rng, x.nrows(), x.ncols())))
        } else {
            (0.0, None)
        };
        x = match ddim_step(x0_hat.view(), eps_hat.view(), next, sig, s, z.as_ref().map(|z| z.view())) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(diverged()),
            Err(e) => return Err(e),
        };
    }
    Ok(x)
}

/// Draws `batch` samples of `dims` features from pure noise.
pub fn sample<M: EpsilonModel + ?Sized>(
    model: &M,
    s: &NoiseSchedule,
    path: &SamplingPath,
    batch: usize,
    dims: usize,
    sigma: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    let x = initial_noise(batch, dims, seed);
    let mut rng = stream_rng(seed, Stream::Sampling);
    // continue the stream after the initial draw for the stochastic terms
    let _ = standard_normal(&mut rng, batch, dims);
    sample_from(model, s, path, x.view(), sigma, Some(&mut rng))
}
