//! Multi-state training loop: a gradient-trained base model, its EMA copy,
//! and a periodically synced graph model that supplies the edge weights.

mod optim;

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerKind};

use crate::denoiser::{Architecture, Denoiser, EpsilonModel, ParamSet, Trainable};
use crate::diffusion::forward_noise;
use crate::error::{Error, Result};
use crate::losses::{
    noise_loss, noise_loss_grad, objective, total_loss, LossBreakdown, LossVariant,
    ObjectiveInputs, RelaxTargets,
};
use crate::residual::{dist, edge_transforms};
use crate::rng::{epoch_rng, standard_normal, stream_rng, Stream};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub ema_decay: f64,
    pub graph_sync_interval: u64,
    pub total_iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub optimizer: OptimizerKind,
    /// When false the relaxation term is never evaluated and training is
    /// plain noise regression.
    pub relax_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ema_decay: 0.999,
            graph_sync_interval: 100,
            total_iterations: 1000,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            loss_variant: LossVariant::L2norm,
            optimizer: OptimizerKind::Sgd,
            relax_enabled: true,
        }
    }
}

impl TrainConfig {
    /// Every invalid field, one per line.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            problems.push(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            problems.push(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.graph_sync_interval == 0 {
            problems.push("graph_sync_interval must be positive".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("\n")));
        }
        if self.relax_enabled && self.graph_sync_interval > self.total_iterations {
            warn!(
                "graph_sync_interval {} exceeds total_iterations {}: the graph model is never synced",
                self.graph_sync_interval, self.total_iterations
            );
        }
        Ok(())
    }
}

/// Base, EMA and graph models. All three always share one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTriplet {
    pub base: Denoiser,
    pub ema: Denoiser,
    pub graph: Denoiser,
}

impl ModelTriplet {
    pub fn new(base: Denoiser) -> Self {
        Self {
            ema: base.clone(),
            graph: base.clone(),
            base,
        }
    }

    pub fn from_parts(base: Denoiser, ema: Denoiser, graph: Denoiser) -> Result<Self> {
        if base.architecture() != ema.architecture() || base.architecture() != graph.architecture()
        {
            return Err(Error::Config("triplet models differ in architecture".into()));
        }
        Ok(Self { base, ema, graph })
    }

    /// Copies the EMA parameters into the graph model.
    pub fn sync_graph(&mut self) -> Result<()> {
        let ema = self.ema.params().clone();
        self.graph.params_mut().copy_from(&ema)
    }
}

/// `ema <- alpha * ema + (1 - alpha) * base`, evaluated as
/// `ema + (1 - alpha) * (base - ema)` so that equal inputs stay bit-exact.
pub fn ema_update(ema: &mut ParamSet, base: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("ema decay {alpha} outside [0, 1]")));
    }
    ema.check_layout(base)?;
    let w = 1.0 - alpha;
    for ((_, e), (_, b)) in ema.iter_mut().zip(base.iter()) {
        e.zip_mut_with(b, |e, &b| *e += w * (b - *e));
    }
    Ok(())
}

/// Draws `t` uniformly from `[2, T]`, then `k` uniformly from `[1, t - 1]`.
pub fn sample_step_pair<R: Rng + ?Sized>(rng: &mut R, timesteps: usize) -> Result<(usize, usize)> {
    if timesteps < 2 {
        return Err(Error::Config(format!(
            "step pairs need at least 2 timesteps, got {timesteps}"
        )));
    }
    let t = rng.random_range(2..=timesteps);
    let k = rng.random_range(1..t);
    Ok((t, k))
}

/// Position in the shuffled data order. Each epoch uses a fresh permutation
/// derived from the run seed and the epoch number; batches run across epoch
/// boundaries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCursor {
    pub epoch: u64,
    pub position: usize,
}

impl BatchCursor {
    fn permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng(seed, epoch));
        order
    }

    pub fn next_batch(&mut self, data: ArrayView2<f64>, batch: usize, seed: u64) -> Result<Array2<f64>> {
        let n = data.nrows();
        if n == 0 {
            return Err(Error::Dataset(vec!["dataset is empty".into()]));
        }
        let mut order = Self::permutation(seed, self.epoch, n);
        let mut rows = Vec::with_capacity(batch);
        while rows.len() < batch {
            if self.position >= n {
                self.epoch += 1;
                self.position = 0;
                order = Self::permutation(seed, self.epoch, n);
            }
            rows.push(order[self.position]);
            self.position += 1;
        }
        Ok(data.select(Axis(0), &rows))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub t: usize,
    pub k: usize,
    pub noise_loss: f64,
    pub relax_loss: f64,
    pub cond_rate: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(iteration: u64, t: usize, k: usize, b: &LossBreakdown) -> Self {
        Self {
            iteration,
            t,
            k,
            noise_loss: b.noise_loss,
            relax_loss: b.relax_loss,
            cond_rate: b.cond_rate,
            total: b.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub noise: ChaCha8Rng,
    pub pairs: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            noise: stream_rng(seed, Stream::Noise),
            pairs: stream_rng(seed, Stream::Pairs),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iteration: u64,
    pub triplet: ModelTriplet,
    pub optimizer: Optimizer,
    pub rngs: TrainRngs,
    pub cursor: BatchCursor,
    pub log: Vec<LossRecord>,
}

impl TrainState {
    /// Fresh state: all three models hold the seed initialization.
    pub fn new(arch: Architecture, cfg: &TrainConfig) -> Result<Self> {
        Self::from_model(Denoiser::new(arch, cfg.seed)?, cfg)
    }

    pub fn from_model(base: Denoiser, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, base.params());
        Ok(Self {
            iteration: 0,
            triplet: ModelTriplet::new(base),
            optimizer,
            rngs: TrainRngs::new(cfg.seed),
            cursor: BatchCursor::default(),
            log: Vec::new(),
        })
    }
}

fn diverged(iteration: u64, t: usize, k: usize, cond_rate: f64, detail: &str) -> Error {
    Error::Diverged {
        iteration,
        t,
        k,
        cond_rate,
        detail: detail.to_string(),
    }
}

fn all_finite<'a>(mut values: impl Iterator<Item = &'a f64>) -> bool {
    values.all(|v| v.is_finite())
}

/// Shared tail of a step: check, update base, decay EMA, maybe sync.
fn finish_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    x_t: ArrayView2<f64>,
    t: usize,
    k: usize,
    breakdown: &LossBreakdown,
    grad_eps_hat: ArrayView2<f64>,
) -> Result<LossRecord> {
    let iteration = state.iteration + 1;
    let fail = |detail: &str| diverged(iteration, t, k, breakdown.cond_rate, detail);
    if !(breakdown.noise_loss.is_finite()
        && breakdown.relax_loss.is_finite()
        && breakdown.total.is_finite())
    {
        return Err(fail("non-finite loss"));
    }
    if !all_finite(grad_eps_hat.iter()) {
        return Err(fail("non-finite loss gradient"));
    }
    let grads = state.triplet.base.backward(x_t, t, grad_eps_hat)?;
    if !grads.iter().all(|(_, g)| all_finite(g.iter())) {
        return Err(fail("non-finite parameter gradient"));
    }
    state
        .optimizer
        .apply(state.triplet.base.params_mut(), &grads)?;
    if !state
        .triplet
        .base
        .params()
        .iter()
        .all(|(_, p)| all_finite(p.iter()))
    {
        return Err(fail("non-finite parameters after update"));
    }
    let base = state.triplet.base.params().clone();
    ema_update(state.triplet.ema.params_mut(), &base, cfg.ema_decay)?;
    state.iteration = iteration;
    if iteration.is_multiple_of(cfg.graph_sync_interval) {
        state.triplet.sync_graph()?;
    }
    let record = LossRecord::new(iteration, t, k, breakdown);
    state.log.push(record);
    Ok(record)
}

/// One iteration of the multi-state loop on a given batch.
pub fn train_step(
    state: &mut TrainState,
    x0: ArrayView2<f64>,
    cfg: &TrainConfig,
    s: &NoiseSchedule,
) -> Result<LossRecord> {
    let (t, k) = sample_step_pair(&mut state.rngs.pairs, s.timesteps())?;
    let eps = standard_normal(&mut state.rngs.noise, x0.nrows(), x0.ncols());
    let x_t = forward_noise(x0, eps.view(), t, s)?;
    let eps_hat = state.triplet.base.predict(x_t.view(), t)?;

    let targets = if cfg.relax_enabled {
        let tr = edge_transforms(x0, x_t.view(), t, k, &state.triplet.graph, s)?;
        let dist_k = dist(x0, tr.x_k.view(), k, &state.triplet.ema, s)?;
        Some((dist_k, tr.edge))
    } else {
        None
    };
    let inputs = ObjectiveInputs {
        x0,
        eps: eps.view(),
        x_t: x_t.view(),
        t,
        lambda: cfg.lambda,
        variant: cfg.loss_variant,
        relax: targets.as_ref().map(|(dist_k, edge)| RelaxTargets {
            dist_k: dist_k.view(),
            edge: edge.view(),
        }),
    };
    let value = objective(eps_hat.view(), &inputs, s)?;
    finish_step(
        state,
        cfg,
        x_t.view(),
        t,
        k,
        &value.breakdown,
        value.grad_eps_hat.view(),
    )
}

/// Plain noise-regression step `lambda * L_eps`, drawing from the same
/// streams as [`train_step`]. Reference for the relaxation-free case.
pub fn ddim_train_step(
    state: &mut TrainState,
    x0: ArrayView2<f64>,
    cfg: &TrainConfig,
    s: &NoiseSchedule,
) -> Result<LossRecord> {
    let (t, k) = sample_step_pair(&mut state.rngs.pairs, s.timesteps())?;
    let eps = standard_normal(&mut state.rngs.noise, x0.nrows(), x0.ncols());
    let x_t = forward_noise(x0, eps.view(), t, s)?;
    let eps_hat = state.triplet.base.predict(x_t.view(), t)?;
    let noise = noise_loss(eps.view(), eps_hat.view(), cfg.loss_variant)?;
    let mut grad = noise_loss_grad(eps.view(), eps_hat.view(), cfg.loss_variant)?;
    grad.mapv_inplace(|g| cfg.lambda * g);
    let breakdown = total_loss(noise, 0.0, cfg.lambda, &vec![false; x0.nrows()]);
    finish_step(state, cfg, x_t.view(), t, k, &breakdown, grad.view())
}

/// Which per-iteration update [`run_training_with`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    MultiState,
    DdimOnly,
}

/// Runs iterations until `cfg.total_iterations`, continuing from whatever
/// iteration `state` is at. `observer` sees the state after every step and
/// may stop the run by returning an error.
pub fn run_training_with<F>(
    state: &mut TrainState,
    data: ArrayView2<f64>,
    cfg: &TrainConfig,
    s: &NoiseSchedule,
    rule: StepRule,
    mut observer: F,
) -> Result<()>
where
    F: FnMut(&TrainState, &LossRecord) -> Result<()>,
{
    cfg.validate()?;
    while state.iteration < cfg.total_iterations {
        let batch = state.cursor.next_batch(data, cfg.batch_size, cfg.seed)?;
        let record = match rule {
            StepRule::MultiState => train_step(state, batch.view(), cfg, s)?,
            StepRule::DdimOnly => ddim_train_step(state, batch.view(), cfg, s)?,
        };
        observer(state, &record)?;
    }
    Ok(())
}

pub fn run_training(
    state: &mut TrainState,
    data: ArrayView2<f64>,
    cfg: &TrainConfig,
    s: &NoiseSchedule,
) -> Result<()> {
    run_training_with(state, data, cfg, s, StepRule::MultiState, |_, _| Ok(()))
}
