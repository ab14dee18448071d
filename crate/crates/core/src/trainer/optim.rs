use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::denoiser::ParamSet;
use crate::error::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain stochastic gradient descent with a fixed step.
    #[default]
    Sgd,
    /// Adam with (0.9, 0.999, 1e-8).
    Adam,
}

/// Optimizer with its per-parameter accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    steps: u64,
    first_moment: Option<ParamSet>,
    second_moment: Option<ParamSet>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, layout: &ParamSet) -> Self {
        let (first_moment, second_moment) = match kind {
            OptimizerKind::Sgd => (None, None),
            OptimizerKind::Adam => (Some(layout.zeros_like()), Some(layout.zeros_like())),
        };
        Self {
            kind,
            learning_rate,
            steps: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.check_layout(grads)?;
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grads, -lr),
            OptimizerKind::Adam => {
                let (m, v) = match (&mut self.first_moment, &mut self.second_moment) {
                    (Some(m), Some(v)) => (m, v),
                    _ => return Err(Error::Usage("adam state missing".into())),
                };
                let step = self.steps as i32;
                let bias1 = 1.0 - ADAM_BETA1.powi(step);
                let bias2 = 1.0 - ADAM_BETA2.powi(step);
                for (((_, p), (_, g)), ((_, m), (_, v))) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    });
                }
                Ok(())
            }
        }
    }

    /// Accumulator arrays as `(prefix, set)` pairs, for persistence.
    pub fn state_sets(&self) -> Vec<(&'static str, &ParamSet)> {
        let mut out = Vec::new();
        if let Some(m) = &self.first_moment {
            out.push(("adam_m", m));
        }
        if let Some(v) = &self.second_moment {
            out.push(("adam_v", v));
        }
        out
    }

    pub fn restore(
        kind: OptimizerKind,
        learning_rate: f64,
        steps: u64,
        mut sets: Vec<(String, ParamSet)>,
        layout: &ParamSet,
    ) -> Result<Self> {
        let mut opt = Self::new(kind, learning_rate, layout);
        opt.steps = steps;
        let mut take = |name: &str| -> Result<ParamSet> {
            let pos = sets
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::format("optimizer state", format!("missing {name}")))?;
            let (_, set) = sets.swap_remove(pos);
            layout.check_layout(&set)?;
            Ok(set)
        };
        if kind == OptimizerKind::Adam {
            opt.first_moment = Some(take("adam_m")?);
            opt.second_moment = Some(take("adam_v")?);
        }
        Ok(opt)
    }
}
