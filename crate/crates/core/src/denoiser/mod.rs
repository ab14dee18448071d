//! Epsilon-predictors `eps(x, t)`.
//!
//! [`EpsilonModel`] is the evaluation contract every sampler and residual
//! routine consumes. [`Trainable`] adds parameter access and a
//! vector-Jacobian product, which is all the trainer needs. [`Denoiser`] is
//! the concrete, serializable model used for training runs.

mod conv;
mod embedding;
mod mlp;
mod params;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, ArrayD, ArrayView2, IxDyn, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use conv::ConvSpec;
pub use embedding::TimeEmbedding;
pub use mlp::MlpSpec;
pub use params::ParamSet;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::schedule::NoiseSchedule;

pub trait EpsilonModel {
    /// Predicted noise for a `[batch, dims]` input at timestep `t`. The output
    /// has the input's shape.
    fn predict(&self, x: ArrayView2<f64>, t: usize) -> Result<Array2<f64>>;
}

impl<F> EpsilonModel for F
where
    F: Fn(ArrayView2<f64>, usize) -> Array2<f64>,
{
    fn predict(&self, x: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        Ok(self(x, t))
    }
}

pub trait Trainable: EpsilonModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Gradient of `sum(grad_out * predict(x, t))` with respect to the
    /// parameters. Does not modify the model.
    fn backward(&self, x: ArrayView2<f64>, t: usize, grad_out: ArrayView2<f64>)
        -> Result<ParamSet>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp(MlpSpec),
    Conv(ConvSpec),
    /// `eps = scale * x + bias` with two scalar parameters; a hand-checkable toy.
    Affine,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp(spec) => spec.validate(),
            Architecture::Conv(spec) => spec.validate(),
            Architecture::Affine => Ok(()),
        }
    }

    /// Flat data dimension the model accepts, if fixed.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            Architecture::Mlp(spec) => Some(spec.input_dim),
            Architecture::Conv(spec) => Some(spec.input_dim()),
            Architecture::Affine => None,
        }
    }
}

/// A model instance: architecture plus its parameters. Cloning deep-copies the
/// parameters, so a clone evolves independently of its source.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: Architecture,
    params: ParamSet,
}

impl Denoiser {
    /// Deterministic initialization from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let params = match &arch {
            Architecture::Mlp(spec) => spec.init(&mut rng),
            Architecture::Conv(spec) => spec.init(&mut rng),
            Architecture::Affine => {
                let mut p = ParamSet::new();
                p.push("scale", ArrayD::zeros(IxDyn(&[1])));
                p.push("bias", ArrayD::zeros(IxDyn(&[1])));
                p
            }
        };
        Ok(Self { arch, params })
    }

    /// Rebuilds a model from persisted parameters, checking their layout
    /// against a fresh instance of the architecture.
    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self> {
        let reference = Self::new(arch, 0)?;
        reference.params.check_layout(&params)?;
        Ok(Self {
            arch: reference.arch,
            params,
        })
    }

    pub fn affine(scale: f64, bias: f64) -> Self {
        let mut model = Self::new(Architecture::Affine, 0).expect("affine is always valid");
        model.params.at_mut(0).fill(scale);
        model.params.at_mut(1).fill(bias);
        model
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }
}

pub fn make_mlp_denoiser(
    input_dim: usize,
    hidden_dims: &[usize],
    embed_dim: usize,
    seed: u64,
) -> Result<Denoiser> {
    Denoiser::new(
        Architecture::Mlp(MlpSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            embed_dim,
        }),
        seed,
    )
}

pub fn clone_parameters(src: &Denoiser) -> Denoiser {
    src.clone()
}

impl EpsilonModel for Denoiser {
    fn predict(&self, x: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        match &self.arch {
            Architecture::Mlp(spec) => mlp::forward(spec, &self.params, x, t),
            Architecture::Conv(spec) => conv::forward(spec, &self.params, x, t),
            Architecture::Affine => {
                let (scale, bias) = (self.params.at(0)[0], self.params.at(1)[0]);
                Ok(x.mapv(|v| scale * v + bias))
            }
        }
    }
}

impl Trainable for Denoiser {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn backward(
        &self,
        x: ArrayView2<f64>,
        t: usize,
        grad_out: ArrayView2<f64>,
    ) -> Result<ParamSet> {
        match &self.arch {
            Architecture::Mlp(spec) => mlp::backward(spec, &self.params, x, t, grad_out),
            Architecture::Conv(spec) => conv::backward(spec, &self.params, x, t, grad_out),
            Architecture::Affine => {
                if x.shape() != grad_out.shape() {
                    return Err(Error::Shape {
                        expected: x.shape().to_vec(),
                        got: grad_out.shape().to_vec(),
                    });
                }
                let mut grads = self.params.zeros_like();
                grads.at_mut(0)[0] = Zip::from(&x)
                    .and(&grad_out)
                    .fold(0.0, |acc, &xv, &g| acc + xv * g);
                grads.at_mut(1)[0] = grad_out.sum();
                Ok(grads)
            }
        }
    }
}

/// Returns the noise that is exactly consistent with a known clean batch:
/// `(x - sqrt(ab_t) * x0) / sqrt(1 - ab_t)`. On any `x = forward_noise(x0, eps, t)`
/// this reproduces `eps`, which makes it the perfect predictor for `x0`.
pub struct PerfectPredictor<'a> {
    x0: ArrayView2<'a, f64>,
    schedule: &'a NoiseSchedule,
}

impl<'a> PerfectPredictor<'a> {
    pub fn new(x0: ArrayView2<'a, f64>, schedule: &'a NoiseSchedule) -> Self {
        Self { x0, schedule }
    }
}

impl EpsilonModel for PerfectPredictor<'_> {
    fn predict(&self, x: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        if x.shape() != self.x0.shape() {
            return Err(Error::Shape {
                expected: self.x0.shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        if t == 0 {
            // alpha_bar_0 = 1: any prediction maps back onto x itself.
            return Ok(Array2::zeros(x.raw_dim()));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Zip::from(&x)
            .and(&self.x0)
            .map_collect(|&xv, &x0| (xv - signal * x0) / noise))
    }
}

/// Counts network evaluations of the wrapped model.
pub struct CountingModel<'a, M: ?Sized> {
    inner: &'a M,
    calls: AtomicUsize,
}

impl<'a, M: EpsilonModel + ?Sized> CountingModel<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<M: EpsilonModel + ?Sized> EpsilonModel for CountingModel<'_, M> {
    fn predict(&self, x: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(x, t)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::diffusion::forward_noise;
    use crate::schedule::make_linear_schedule;

    fn grid(rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 31 + j * 17) % 13) as f64 / 6.5 - 1.0)
    }

    fn tiny_conv() -> Architecture {
        Architecture::Conv(ConvSpec {
            channels: 1,
            height: 4,
            width: 3,
            hidden_channels: vec![3],
            embed_dim: 2,
        })
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = make_mlp_denoiser(2, &[16, 16], 8, 7).unwrap();
        let b = make_mlp_denoiser(2, &[16, 16], 8, 7).unwrap();
        assert!(a.params().bit_eq(b.params()));
        let c = make_mlp_denoiser(2, &[16, 16], 8, 8).unwrap();
        assert!(!a.params().bit_eq(c.params()));
    }

    #[test]
    fn output_shape_matches_input() {
        let m = make_mlp_denoiser(2, &[8], 4, 0).unwrap();
        assert_eq!(m.predict(grid(5, 2).view(), 3).unwrap().shape(), &[5, 2]);
        let c = Denoiser::new(tiny_conv(), 0).unwrap();
        assert_eq!(c.predict(grid(2, 12).view(), 3).unwrap().shape(), &[2, 12]);
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let m = make_mlp_denoiser(2, &[8], 4, 0).unwrap();
        assert!(matches!(m.predict(grid(5, 3).view(), 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_parameters_predict_zero() {
        for arch in [
            Architecture::Mlp(MlpSpec {
                input_dim: 3,
                hidden_dims: vec![5, 4],
                embed_dim: 4,
            }),
            tiny_conv(),
        ] {
            let mut m = Denoiser::new(arch, 1).unwrap();
            m.params_mut().fill(0.0);
            let dim = m.architecture().input_dim().unwrap();
            let out = m.predict(grid(4, dim).view(), 9).unwrap();
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn clone_is_isolated() {
        let mut src = make_mlp_denoiser(2, &[8], 4, 3).unwrap();
        let copy = clone_parameters(&src);
        assert!(copy.params().bit_eq(src.params()));
        let x = grid(3, 2);
        let before = copy.predict(x.view(), 5).unwrap();
        src.params_mut().fill(0.25);
        assert_eq!(copy.predict(x.view(), 5).unwrap(), before);
        assert_ne!(src.predict(x.view(), 5).unwrap(), before);
    }

    #[test]
    fn triple_clone_predicts_identically() {
        let base = make_mlp_denoiser(2, &[8, 8], 4, 11).unwrap();
        let (ema, graph) = (clone_parameters(&base), clone_parameters(&base));
        let x = grid(6, 2);
        let a = base.predict(x.view(), 17).unwrap();
        assert_eq!(a, ema.predict(x.view(), 17).unwrap());
        assert_eq!(a, graph.predict(x.view(), 17).unwrap());
    }

    #[test]
    fn from_params_checks_layout() {
        let m = make_mlp_denoiser(2, &[8], 4, 3).unwrap();
        let ok = Denoiser::from_params(m.architecture().clone(), m.params().clone()).unwrap();
        assert_eq!(ok, m);
        let other = make_mlp_denoiser(2, &[9], 4, 3).unwrap();
        assert!(Denoiser::from_params(m.architecture().clone(), other.params().clone()).is_err());
    }

    #[test]
    fn perfect_predictor_recovers_noise() {
        let s = make_linear_schedule(20, 1e-3, 0.2).unwrap();
        let x0 = grid(4, 3);
        let eps = grid(4, 3).mapv(|v| 0.5 - v);
        let xt = forward_noise(x0.view(), eps.view(), 13, &s).unwrap();
        let pred = PerfectPredictor::new(x0.view(), &s)
            .predict(xt.view(), 13)
            .unwrap();
        for (p, e) in pred.iter().zip(eps.iter()) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn counting_model_counts() {
        let m = Denoiser::affine(0.1, 0.0);
        let counter = CountingModel::new(&m);
        let x = grid(2, 2);
        counter.predict(x.view(), 1).unwrap();
        counter.predict(x.view(), 2).unwrap();
        assert_eq!(counter.calls(), 2);
    }

    #[test]
    fn silu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
