//! Forward noising, clean-sample estimation and the DDIM transition.
//!
//! Every array is `[batch, dims]`. Coefficients are computed in `f64` from the
//! cached `alpha_bar` table.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub(crate) fn check_same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn ensure_finite(a: Array2<f64>, op: &str) -> Result<Array2<f64>> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(a)
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn noisy_timestep(t: usize, s: &NoiseSchedule) -> Result<f64> {
    if t == 0 {
        return Err(Error::Timestep {
            t,
            min: 1,
            max: s.timesteps(),
        });
    }
    s.alpha_bar(t)
}

/// `x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
pub fn forward_noise(
    x0: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(&x0, &eps)?;
    let ab = noisy_timestep(t, s)?;
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out = Zip::from(&x0)
        .and(&eps)
        .map_collect(|&x, &e| signal * x + noise * e);
    ensure_finite(out, "forward_noise")
}

/// `x0_hat = (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)`.
pub fn estimate_x0(
    x_t: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(&x_t, &eps_hat)?;
    let ab = noisy_timestep(t, s)?;
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out = Zip::from(&x_t)
        .and(&eps_hat)
        .map_collect(|&x, &e| (x - noise * e) / signal);
    ensure_finite(out, "estimate_x0")
}

/// DDIM jump to step `k`:
/// `sqrt(ab_k) * x0_hat + sqrt(1 - ab_k - sigma^2) * eps_hat + sigma * fresh_noise`.
///
/// `fresh_noise` is required exactly when `sigma > 0`. With `sigma == 0` the map
/// is deterministic, and `k == 0` returns `x0_hat` unchanged.
pub fn ddim_step(
    x0_hat: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    k: usize,
    sigma: f64,
    s: &NoiseSchedule,
    fresh_noise: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    check_same_shape(&x0_hat, &eps_hat)?;
    let ab = s.alpha_bar(k)?;
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let radicand = 1.0 - ab - sigma * sigma;
    if radicand < 0.0 {
        return Err(Error::Domain(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar_{k} = {}",
            sigma * sigma,
            1.0 - ab
        )));
    }
    let (signal, direction) = (ab.sqrt(), radicand.sqrt());
    let out = match (sigma > 0.0, fresh_noise) {
        (false, None) => Zip::from(&x0_hat)
            .and(&eps_hat)
            .map_collect(|&x, &e| signal * x + direction * e),
        (true, Some(z)) => {
            check_same_shape(&x0_hat, &z)?;
            Zip::from(&x0_hat)
                .and(&eps_hat)
                .and(&z)
                .map_collect(|&x, &e, &n| signal * x + direction * e + sigma * n)
        }
        (true, None) => {
            return Err(Error::Usage("sigma > 0 requires fresh noise".into()));
        }
        (false, Some(_)) => {
            return Err(Error::Usage(
                "fresh noise supplied to a deterministic (sigma = 0) step".into(),
            ));
        }
    };
    ensure_finite(out, "ddim_step")
}
