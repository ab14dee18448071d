//! Variance schedule: `beta_t`, `alpha_t = 1 - beta_t` and the cumulative
//! products `alpha_bar_t`.
//!
//! Timesteps are 1-indexed (`t` in `[1, T]`). Index 0 is the clean-data
//! boundary where `alpha_bar_0 = 1` exactly, so a DDIM jump to `k = 0` uses the
//! same code path as any other jump.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Constructor arguments of a schedule. This is what gets persisted; the
/// tables are rederived on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => {
                make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
            }
        }
    }
}

/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linearly interpolates `beta_start..=beta_end` over `timesteps` points.
pub fn make_linear_schedule(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta bounds must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        let span = (timesteps - 1) as f64;
        (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * (i as f64 / span))
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars: Vec<f64> = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        params: ScheduleParams {
            timesteps,
            beta_start,
            beta_end,
            kind: ScheduleKind::Linear,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Total number of diffusion steps `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.alphas[t - 1])
    }

    /// `alpha_bar(0) == 1.0` exactly; `t` in `[1, T]` returns the cached product.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `sqrt(1 - alpha_bar_t) / sqrt(alpha_bar_t)`, the factor mapping a noise
    /// prediction error at step `t` onto a clean-sample error.
    pub fn noise_to_signal(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok((1.0 - ab).sqrt() / ab.sqrt())
    }

    fn check(&self, t: usize, min: usize) -> Result<()> {
        let max = self.timesteps();
        if t < min || t > max {
            return Err(Error::Timestep { t, min, max });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_first_alpha_bar() {
        let s = ScheduleParams::default().build().unwrap();
        assert_eq!(s.timesteps(), 1000);
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn two_step_hand_product() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn single_point() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn clean_boundary_is_exactly_one() {
        let s = make_linear_schedule(10, 1e-3, 0.3).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(make_linear_schedule(0, 0.1, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_linear_schedule(5, 0.0, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_linear_schedule(5, 0.3, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_linear_schedule(5, 0.1, 1.0), Err(Error::Config(_))));
        assert!(matches!(make_linear_schedule(5, f64::NAN, 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_timestep() {
        let s = make_linear_schedule(4, 0.1, 0.2).unwrap();
        assert!(matches!(s.alpha_bar(5), Err(Error::Timestep { t: 5, .. })));
        assert!(matches!(s.beta(0), Err(Error::Timestep { t: 0, .. })));
    }
}
