//! Noise loss, relaxation loss and their gated sum, each with its analytic
//! gradient so the trainer can backpropagate into the base model.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::diffusion::{check_same_shape, estimate_x0};
use crate::error::{Error, Result};
use crate::residual::{relaxation_cond, Reduction};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Batch mean of per-sample Euclidean norms.
    #[default]
    L2norm,
    /// Mean of squared errors over all elements.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub noise_loss: f64,
    pub relax_loss: f64,
    /// Fraction of batch samples whose relaxation condition fired.
    pub cond_rate: f64,
    pub total: f64,
    pub lambda: f64,
}

fn nonempty(a: &ArrayView2<f64>) -> Result<()> {
    if a.nrows() == 0 {
        return Err(Error::Usage("loss over an empty batch".into()));
    }
    Ok(())
}

fn row_norms(diff: &Array2<f64>) -> Vec<f64> {
    diff.axis_iter(Axis(0))
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub fn noise_loss(
    eps: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    variant: LossVariant,
) -> Result<f64> {
    check_same_shape(&eps, &eps_hat)?;
    nonempty(&eps)?;
    let diff = &eps - &eps_hat;
    Ok(match variant {
        LossVariant::L2norm => row_norms(&diff).iter().sum::<f64>() / eps.nrows() as f64,
        LossVariant::Mse => diff.mapv(|v| v * v).mean().unwrap_or(0.0),
    })
}

/// Gradient of [`noise_loss`] with respect to `eps_hat`.
pub fn noise_loss_grad(
    eps: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    variant: LossVariant,
) -> Result<Array2<f64>> {
    check_same_shape(&eps, &eps_hat)?;
    nonempty(&eps)?;
    let mut diff = &eps_hat - &eps;
    let b = eps.nrows() as f64;
    match variant {
        LossVariant::L2norm => {
            for mut row in diff.axis_iter_mut(Axis(0)) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.mapv_inplace(|v| v / (n * b));
                } else {
                    row.fill(0.0);
                }
            }
        }
        LossVariant::Mse => {
            let scale = 2.0 / diff.len() as f64;
            diff.mapv_inplace(|v| v * scale);
        }
    }
    Ok(diff)
}

fn relax_residual(
    dist_t: &ArrayView2<f64>,
    dist_k: &ArrayView2<f64>,
    edge: &ArrayView2<f64>,
    cond: &[bool],
) -> Result<Array2<f64>> {
    check_same_shape(dist_t, dist_k)?;
    check_same_shape(dist_t, edge)?;
    nonempty(dist_t)?;
    if cond.len() != dist_t.nrows() {
        return Err(Error::Shape {
            expected: vec![dist_t.nrows()],
            got: vec![cond.len()],
        });
    }
    Ok(Zip::from(dist_k)
        .and(edge)
        .and(dist_t)
        .map_collect(|&k, &e, &t| k + e - t))
}

/// Batch mean of `cond_i * ||dist_k + edge - dist_t||_2` over samples.
pub fn relax_loss(
    dist_t: ArrayView2<f64>,
    dist_k: ArrayView2<f64>,
    edge: ArrayView2<f64>,
    cond: &[bool],
) -> Result<f64> {
    let v = relax_residual(&dist_t, &dist_k, &edge, cond)?;
    let norms = row_norms(&v);
    let sum: f64 = norms
        .iter()
        .zip(cond)
        .filter(|(_, &c)| c)
        .map(|(n, _)| n)
        .sum();
    Ok(sum / dist_t.nrows() as f64)
}

/// Gradient of [`relax_loss`] with respect to `dist_t`; `dist_k` and `edge`
/// are constants. Rows whose condition is false are exactly zero.
pub fn relax_loss_grad(
    dist_t: ArrayView2<f64>,
    dist_k: ArrayView2<f64>,
    edge: ArrayView2<f64>,
    cond: &[bool],
) -> Result<Array2<f64>> {
    let mut v = relax_residual(&dist_t, &dist_k, &edge, cond)?;
    let b = dist_t.nrows() as f64;
    for (mut row, &c) in v.axis_iter_mut(Axis(0)).zip(cond) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if c && n > 0.0 {
            row.mapv_inplace(|x| -x / (n * b));
        } else {
            row.fill(0.0);
        }
    }
    Ok(v)
}

fn cond_rate(cond: &[bool]) -> f64 {
    if cond.is_empty() {
        0.0
    } else {
        cond.iter().filter(|&&c| c).count() as f64 / cond.len() as f64
    }
}

/// `total = lambda * noise + relax`, where `relax` is already gated.
pub fn total_loss(noise: f64, relax: f64, lambda: f64, cond: &[bool]) -> LossBreakdown {
    LossBreakdown {
        noise_loss: noise,
        relax_loss: relax,
        cond_rate: cond_rate(cond),
        total: lambda * noise + relax,
        lambda,
    }
}

/// Constants of the relaxation term for one batch: step-`k` distance from the
/// EMA model and edge weights from the graph model.
#[derive(Debug, Clone, Copy)]
pub struct RelaxTargets<'a> {
    pub dist_k: ArrayView2<'a, f64>,
    pub edge: ArrayView2<'a, f64>,
}

/// Inputs of the training objective that do not depend on the base model.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub x0: ArrayView2<'a, f64>,
    pub eps: ArrayView2<'a, f64>,
    pub x_t: ArrayView2<'a, f64>,
    pub t: usize,
    pub lambda: f64,
    pub variant: LossVariant,
    /// `None` disables the relaxation term entirely.
    pub relax: Option<RelaxTargets<'a>>,
}

/// Evaluated objective and its gradient with respect to the base model's
/// noise prediction at `(x_t, t)`.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub breakdown: LossBreakdown,
    pub cond: Vec<bool>,
    pub dist_t: Array2<f64>,
    pub grad_eps_hat: Array2<f64>,
}

/// `lambda * L_eps(eps, eps_hat) + mean_i cond_i * ||dist_k + edge - |x0 - x0_hat(eps_hat)|||`.
///
/// `dist_t` is differentiated through `x0_hat(eps_hat)`:
/// `d|R|/d eps_hat = sign(R) * sqrt(1 - ab_t) / sqrt(ab_t)`.
pub fn objective(
    eps_hat: ArrayView2<f64>,
    inputs: &ObjectiveInputs<'_>,
    s: &NoiseSchedule,
) -> Result<ObjectiveValue> {
    let noise = noise_loss(inputs.eps, eps_hat, inputs.variant)?;
    let mut grad = noise_loss_grad(inputs.eps, eps_hat, inputs.variant)?;
    grad.mapv_inplace(|g| inputs.lambda * g);

    let x0_hat = estimate_x0(inputs.x_t, eps_hat, inputs.t, s)?;
    let residual = &inputs.x0 - &x0_hat;
    let dist_t = residual.mapv(f64::abs);

    let Some(targets) = inputs.relax else {
        let n = inputs.eps.nrows();
        return Ok(ObjectiveValue {
            breakdown: total_loss(noise, 0.0, inputs.lambda, &vec![false; n]),
            cond: vec![false; n],
            dist_t,
            grad_eps_hat: grad,
        });
    };

    let cond = relaxation_cond(
        dist_t.view(),
        targets.dist_k,
        targets.edge,
        Reduction::PerSampleMean,
    )?;
    let relax = relax_loss(dist_t.view(), targets.dist_k, targets.edge, &cond)?;
    let g_dist = relax_loss_grad(dist_t.view(), targets.dist_k, targets.edge, &cond)?;
    let coef = s.noise_to_signal(inputs.t)?;
    for (i, &fired) in cond.iter().enumerate() {
        // Untouched rows keep the exact bits of the noise-only gradient.
        if !fired {
            continue;
        }
        for j in 0..grad.ncols() {
            let r = residual[[i, j]];
            let sign = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[[i, j]] += g_dist[[i, j]] * sign * coef;
        }
    }
    Ok(ObjectiveValue {
        breakdown: total_loss(noise, relax, inputs.lambda, &cond),
        cond,
        dist_t,
        grad_eps_hat: grad,
    })
}
