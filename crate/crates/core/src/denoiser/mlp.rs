//! Fully connected epsilon-predictor for flat data: `[x | emb(t)]` through
//! SiLU hidden layers and a linear output head.

use ndarray::{concatenate, Array2, ArrayView2, Axis, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::TimeEmbedding;
use super::params::ParamSet;
use super::{silu, silu_grad, uniform_init};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl MlpSpec {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("mlp input_dim must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "mlp needs at least one hidden layer, all of nonzero width".into(),
            ));
        }
        TimeEmbedding::new(self.embed_dim)?;
        Ok(())
    }

    /// (fan_in, fan_out) of every linear layer, output head last.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim + self.embed_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.input_dim));
        dims
    }

    pub(crate) fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut params = ParamSet::new();
        let n_hidden = self.hidden_dims.len();
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let prefix = if l < n_hidden {
                format!("layers.{l}")
            } else {
                "out".to_string()
            };
            params.push(
                format!("{prefix}.weight"),
                uniform_init(rng, &[fan_in, fan_out], fan_in),
            );
            params.push(format!("{prefix}.bias"), uniform_init(rng, &[fan_out], fan_in));
        }
        params
    }
}

struct Cache {
    /// Input of every linear layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

fn weight(params: &ParamSet, layer: usize) -> ArrayView2<'_, f64> {
    params
        .at(2 * layer)
        .view()
        .into_dimensionality::<Ix2>()
        .expect("mlp weights are matrices")
}

fn bias(params: &ParamSet, layer: usize) -> &ndarray::ArrayD<f64> {
    params.at(2 * layer + 1)
}

fn check_input(spec: &MlpSpec, x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != spec.input_dim {
        return Err(Error::Shape {
            expected: vec![x.nrows(), spec.input_dim],
            got: x.shape().to_vec(),
        });
    }
    Ok(())
}

fn forward_cached(
    spec: &MlpSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
    t: usize,
) -> Result<(Array2<f64>, Cache)> {
    check_input(spec, &x)?;
    let emb = TimeEmbedding::new(spec.embed_dim)?.encode_batch(t, x.nrows());
    let mut h = concatenate(Axis(1), &[x, emb.view()]).expect("row counts agree");
    let n_hidden = spec.hidden_dims.len();
    let mut cache = Cache {
        inputs: Vec::with_capacity(n_hidden + 1),
        pre: Vec::with_capacity(n_hidden),
    };
    for l in 0..n_hidden {
        let mut a = h.dot(&weight(params, l));
        a += bias(params, l);
        let next = a.mapv(silu);
        cache.inputs.push(h);
        cache.pre.push(a);
        h = next;
    }
    let mut out = h.dot(&weight(params, n_hidden));
    out += bias(params, n_hidden);
    cache.inputs.push(h);
    Ok((out, cache))
}

pub(crate) fn forward(
    spec: &MlpSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    forward_cached(spec, params, x, t).map(|(out, _)| out)
}

/// Gradient of `sum(grad_out * forward(x, t))` with respect to every parameter.
pub(crate) fn backward(
    spec: &MlpSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
    t: usize,
    grad_out: ArrayView2<f64>,
) -> Result<ParamSet> {
    let (out, cache) = forward_cached(spec, params, x, t)?;
    if out.shape() != grad_out.shape() {
        return Err(Error::Shape {
            expected: out.shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let mut grads = params.zeros_like();
    let n_hidden = spec.hidden_dims.len();
    let mut g = grad_out.to_owned();
    for l in (0..=n_hidden).rev() {
        if l < n_hidden {
            g.zip_mut_with(&cache.pre[l], |gv, &a| *gv *= silu_grad(a));
        }
        let dw = cache.inputs[l].t().dot(&g);
        let db = g.sum_axis(Axis(0));
        grads.at_mut(2 * l).assign(&dw.into_dyn());
        grads.at_mut(2 * l + 1).assign(&db.into_dyn());
        if l > 0 {
            g = g.dot(&weight(params, l).t());
        }
    }
    Ok(grads)
}
