//! Residual propagation along a deterministic reverse path, step-reverse graph
//! edge weights, and the relaxation test.
//!
//! All residual, distance and edge arrays are elementwise (`[batch, dims]`).
//! Scalarization to one value per sample happens only in
//! [`relaxation_cond`] and in the losses, as a mean over feature dimensions.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::EpsilonModel;
use crate::diffusion::{check_same_shape, ddim_step, estimate_x0, forward_noise};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// `R(t, 0) = x0 - x0_hat(x_t, model(x_t, t), t)`.
pub fn initial_residual<M: EpsilonModel + ?Sized>(
    x0: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    t: usize,
    model: &M,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    check_same_shape(&x0, &x_t)?;
    let eps_hat = model.predict(x_t, t)?;
    let x0_hat = estimate_x0(x_t, eps_hat.view(), t, s)?;
    Ok(&x0 - &x0_hat)
}

/// `dist(x_t, t) = |R(t, 0)|` elementwise.
pub fn dist<M: EpsilonModel + ?Sized>(
    x0: ArrayView2<f64>,
    x_noisy: ArrayView2<f64>,
    t: usize,
    model: &M,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    Ok(initial_residual(x0, x_noisy, t, model, s)?.mapv(f64::abs))
}

/// Residual change from step `k_i` to a smaller step `k_j`:
/// `c(k_j) * (model(x_hat_kj, k_j) - model(x_hat_ki, k_i))` with
/// `c(k) = sqrt(1 - ab_k) / sqrt(ab_k)`.
pub fn step_residual<M: EpsilonModel + ?Sized>(
    x_hat_ki: ArrayView2<f64>,
    x_hat_kj: ArrayView2<f64>,
    k_i: usize,
    k_j: usize,
    model: &M,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if k_j >= k_i {
        return Err(Error::Usage(format!(
            "step residual needs k_j < k_i, got k_i={k_i}, k_j={k_j}"
        )));
    }
    check_same_shape(&x_hat_ki, &x_hat_kj)?;
    let eps_i = model.predict(x_hat_ki, k_i)?;
    let eps_j = model.predict(x_hat_kj, k_j)?;
    step_residual_from_predictions(&eps_i, &eps_j, k_j, s)
}

fn step_residual_from_predictions(
    eps_i: &Array2<f64>,
    eps_j: &Array2<f64>,
    k_j: usize,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let c = s.noise_to_signal(k_j)?;
    Ok(Zip::from(eps_j).and(eps_i).map_collect(|&a, &b| c * (a - b)))
}

/// Residual bookkeeping for one deterministic walk `k_1 -> ... -> k_n -> 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub path: Vec<usize>,
    /// `R(k_1, 0)`.
    pub initial_residual: Array2<f64>,
    /// `R(k_i, k_{i+1})` for consecutive path nodes.
    pub per_step_residuals: Vec<Array2<f64>>,
    /// `x0` minus the clean estimate at the last path node.
    pub path_residual_lhs: Array2<f64>,
    /// `R(k_1, 0) - sum_i R(k_i, k_{i+1})`.
    pub path_residual_rhs: Array2<f64>,
}

impl ResidualReport {
    /// Largest elementwise `|lhs - rhs|`.
    pub fn telescoping_gap(&self) -> f64 {
        Zip::from(&self.path_residual_lhs)
            .and(&self.path_residual_rhs)
            .fold(0.0, |m, a, b| f64::max(m, (a - b).abs()))
    }

    pub fn summary(&self) -> ResidualSummary {
        let mean_abs = |a: &Array2<f64>| a.mapv(f64::abs).mean().unwrap_or(0.0);
        ResidualSummary {
            path: self.path.clone(),
            mean_abs_initial: mean_abs(&self.initial_residual),
            mean_abs_steps: self.per_step_residuals.iter().map(mean_abs).collect(),
            mean_abs_lhs: mean_abs(&self.path_residual_lhs),
            mean_abs_rhs: mean_abs(&self.path_residual_rhs),
            max_gap: self.telescoping_gap(),
        }
    }
}

/// Scalar digest of a [`ResidualReport`], one line of structured text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub path: Vec<usize>,
    pub mean_abs_initial: f64,
    pub mean_abs_steps: Vec<f64>,
    pub mean_abs_lhs: f64,
    pub mean_abs_rhs: f64,
    pub max_gap: f64,
}

pub(crate) fn validate_path(path: &[usize], timesteps: usize) -> Result<()> {
    if path.is_empty() {
        return Err(Error::Usage("sampling path is empty".into()));
    }
    if path[0] > timesteps {
        return Err(Error::Timestep {
            t: path[0],
            min: 1,
            max: timesteps,
        });
    }
    if path.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Usage(format!(
            "sampling path must be strictly decreasing: {path:?}"
        )));
    }
    if *path.last().expect("nonempty") == 0 {
        return Err(Error::Usage("sampling path nodes must be >= 1".into()));
    }
    Ok(())
}

/// Walks `path` deterministically from `x_{k_1} = forward_noise(x0, eps, k_1)`
/// and reports both sides of the path-residual decomposition. They are not
/// required to agree; [`ResidualReport::telescoping_gap`] measures the gap.
pub fn path_residual_report<M: EpsilonModel + ?Sized>(
    x0: ArrayView2<f64>,
    path: &[usize],
    model: &M,
    s: &NoiseSchedule,
    eps: ArrayView2<f64>,
) -> Result<ResidualReport> {
    validate_path(path, s.timesteps())?;
    let mut x_hat = forward_noise(x0, eps, path[0], s)?;
    let mut eps_hat = model.predict(x_hat.view(), path[0])?;
    let mut x0_hat = estimate_x0(x_hat.view(), eps_hat.view(), path[0], s)?;
    let initial = &x0 - &x0_hat;

    let mut steps = Vec::with_capacity(path.len() - 1);
    for w in path.windows(2) {
        let (_k_i, k_j) = (w[0], w[1]);
        x_hat = ddim_step(x0_hat.view(), eps_hat.view(), k_j, 0.0, s, None)?;
        let eps_next = model.predict(x_hat.view(), k_j)?;
        steps.push(step_residual_from_predictions(&eps_hat, &eps_next, k_j, s)?);
        eps_hat = eps_next;
        x0_hat = estimate_x0(x_hat.view(), eps_hat.view(), k_j, s)?;
    }

    let lhs = &x0 - &x0_hat;
    let mut rhs = initial.clone();
    for r in &steps {
        rhs -= r;
    }
    Ok(ResidualReport {
        path: path.to_vec(),
        initial_residual: initial,
        per_step_residuals: steps,
        path_residual_lhs: lhs,
        path_residual_rhs: rhs,
    })
}

/// Intermediate quantities of one edge-weight evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTransforms {
    /// Clean estimate at `t` from the graph model.
    pub x0_hat_t: Array2<f64>,
    /// `DDIM(x0_hat_t, eps_t, k, 0)`: estimate-based transform to `k`.
    pub x_hat_k: Array2<f64>,
    /// `DDIM(x0, eps_t, k, 0)`: clean-data transform to `k`.
    pub x_k: Array2<f64>,
    /// `|x0 - x0_hat'(x_hat_k)| - |x0 - x0_hat(x_k)|`.
    pub edge: Array2<f64>,
}

/// Full edge-weight computation, keeping the transformed samples.
pub fn edge_transforms<M: EpsilonModel + ?Sized>(
    x0: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    t: usize,
    k: usize,
    graph_model: &M,
    s: &NoiseSchedule,
) -> Result<EdgeTransforms> {
    if k >= t {
        return Err(Error::Usage(format!("edge needs k < t, got k={k}, t={t}")));
    }
    check_same_shape(&x0, &x_t)?;
    let eps_t = graph_model.predict(x_t, t)?;
    let x0_hat_t = estimate_x0(x_t, eps_t.view(), t, s)?;
    let x_hat_k = ddim_step(x0_hat_t.view(), eps_t.view(), k, 0.0, s, None)?;
    let x_k = ddim_step(x0, eps_t.view(), k, 0.0, s, None)?;
    let (via_estimate, via_clean) = if k == 0 {
        // alpha_bar_0 = 1: the clean estimate at step 0 is the sample itself.
        (x_hat_k.clone(), x_k.clone())
    } else {
        let e_hat = graph_model.predict(x_hat_k.view(), k)?;
        let e = graph_model.predict(x_k.view(), k)?;
        (
            estimate_x0(x_hat_k.view(), e_hat.view(), k, s)?,
            estimate_x0(x_k.view(), e.view(), k, s)?,
        )
    };
    let edge = Zip::from(&x0)
        .and(&via_estimate)
        .and(&via_clean)
        .map_collect(|&x, &a, &b| (x - a).abs() - (x - b).abs());
    Ok(EdgeTransforms {
        x0_hat_t,
        x_hat_k,
        x_k,
        edge,
    })
}

/// `edge(k, t)` elementwise.
pub fn edge_weight<M: EpsilonModel + ?Sized>(
    x0: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    t: usize,
    k: usize,
    graph_model: &M,
    s: &NoiseSchedule,
) -> Result<Array2<f64>> {
    edge_transforms(x0, x_t, t, k, graph_model, s).map(|e| e.edge)
}

/// How arrays are reduced to one scalar per sample before comparing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    PerSampleMean,
}

/// Strict per-sample test `mean(dist_t) > mean(dist_k) + mean(edge)`.
pub fn relaxation_cond(
    dist_t: ArrayView2<f64>,
    dist_k: ArrayView2<f64>,
    edge: ArrayView2<f64>,
    reduction: Reduction,
) -> Result<Vec<bool>> {
    check_same_shape(&dist_t, &dist_k)?;
    check_same_shape(&dist_t, &edge)?;
    match reduction {
        Reduction::PerSampleMean => {
            let lhs = dist_t.mean_axis(Axis(1));
            let rk = dist_k.mean_axis(Axis(1));
            let re = edge.mean_axis(Axis(1));
            Ok(match (lhs, rk, re) {
                (Some(l), Some(a), Some(b)) => l
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&l, (&a, &b))| l > a + b)
                    .collect(),
                // zero feature columns: both sides are empty means
                _ => vec![false; dist_t.nrows()],
            })
        }
    }
}

/// Everything one training-style edge evaluation produces, with the model
/// roles fixed: `dist_t` from `base`, `edge` from `graph`, `dist_k` from `ema`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeEvaluation {
    pub edge: Array2<f64>,
    pub dist_t: Array2<f64>,
    pub dist_k: Array2<f64>,
    pub cond: Vec<bool>,
}

impl EdgeEvaluation {
    pub fn cond_rate(&self) -> f64 {
        if self.cond.is_empty() {
            return 0.0;
        }
        self.cond.iter().filter(|&&c| c).count() as f64 / self.cond.len() as f64
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_edge<B, E, G>(
    x0: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    t: usize,
    k: usize,
    base: &B,
    ema: &E,
    graph: &G,
    s: &NoiseSchedule,
) -> Result<EdgeEvaluation>
where
    B: EpsilonModel + ?Sized,
    E: EpsilonModel + ?Sized,
    G: EpsilonModel + ?Sized,
{
    let dist_t = dist(x0, x_t, t, base, s)?;
    let tr = edge_transforms(x0, x_t, t, k, graph, s)?;
    let dist_k = if k == 0 {
        Array2::zeros(x0.raw_dim())
    } else {
        dist(x0, tr.x_k.view(), k, ema, s)?
    };
    let cond = relaxation_cond(
        dist_t.view(),
        dist_k.view(),
        tr.edge.view(),
        Reduction::PerSampleMean,
    )?;
    Ok(EdgeEvaluation {
        edge: tr.edge,
        dist_t,
        dist_k,
        cond,
    })
}
