//! Small 3x3 convolutional epsilon-predictor for tiny images.
//!
//! Images travel as rows of `[batch, C*H*W]` in CHW order. Internally
//! activations are pixel-major `[batch*H*W, channels]` so every convolution is
//! one im2col matrix product. The time embedding enters as `embed_dim`
//! constant channels concatenated to the input.

use ndarray::{s, Array2, ArrayView2, Axis, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::TimeEmbedding;
use super::params::ParamSet;
use super::{silu, silu_grad, uniform_init};
use crate::error::{Error, Result};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden_channels: Vec<usize>,
    pub embed_dim: usize,
}

impl ConvSpec {
    pub fn input_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("conv image shape must be nonzero".into()));
        }
        if self.hidden_channels.is_empty() || self.hidden_channels.contains(&0) {
            return Err(Error::Config(
                "conv net needs at least one hidden layer, all of nonzero width".into(),
            ));
        }
        TimeEmbedding::new(self.embed_dim)?;
        Ok(())
    }

    fn layer_channels(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut c_in = self.channels + self.embed_dim;
        for &h in &self.hidden_channels {
            dims.push((c_in, h));
            c_in = h;
        }
        dims.push((c_in, self.channels));
        dims
    }

    pub(crate) fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut params = ParamSet::new();
        for (l, (c_in, c_out)) in self.layer_channels().into_iter().enumerate() {
            let fan_in = c_in * TAPS;
            params.push(
                format!("convs.{l}.weight"),
                uniform_init(rng, &[c_out, c_in, KERNEL, KERNEL], fan_in),
            );
            params.push(format!("convs.{l}.bias"), uniform_init(rng, &[c_out], fan_in));
        }
        params
    }
}

/// `[c_out, c_in * 9]` view of a conv kernel.
fn kernel_matrix(params: &ParamSet, layer: usize) -> Array2<f64> {
    let w = params.at(2 * layer);
    let c_out = w.shape()[0];
    let c_in = w.shape()[1];
    w.to_shape((c_out, c_in * TAPS))
        .expect("contiguous kernel")
        .into_dimensionality::<Ix2>()
        .expect("2d")
        .to_owned()
}

fn im2col(act: &Array2<f64>, batch: usize, h: usize, w: usize) -> Array2<f64> {
    let c = act.ncols();
    let mut cols = Array2::zeros((batch * h * w, c * TAPS));
    for n in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let row = (n * h + y) * w + x;
                for dy in 0..KERNEL {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..KERNEL {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (n * h + sy as usize) * w + sx as usize;
                        for i in 0..c {
                            cols[[row, i * TAPS + dy * KERNEL + dx]] = act[[src, i]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, channels: usize, batch: usize, h: usize, w: usize) -> Array2<f64> {
    let mut act = Array2::zeros((batch * h * w, channels));
    for n in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let row = (n * h + y) * w + x;
                for dy in 0..KERNEL {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..KERNEL {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = (n * h + sy as usize) * w + sx as usize;
                        for i in 0..channels {
                            act[[dst, i]] += cols[[row, i * TAPS + dy * KERNEL + dx]];
                        }
                    }
                }
            }
        }
    }
    act
}

fn to_pixels(spec: &ConvSpec, x: &ArrayView2<f64>) -> Array2<f64> {
    let (c, hw) = (spec.channels, spec.height * spec.width);
    let batch = x.nrows();
    Array2::from_shape_fn((batch * hw, c), |(r, ch)| x[[r / hw, ch * hw + r % hw]])
}

fn from_pixels(spec: &ConvSpec, px: &Array2<f64>, batch: usize) -> Array2<f64> {
    let (c, hw) = (spec.channels, spec.height * spec.width);
    Array2::from_shape_fn((batch, c * hw), |(n, j)| px[[n * hw + j % hw, j / hw]])
}

struct Cache {
    cols: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn forward_cached(
    spec: &ConvSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
    t: usize,
) -> Result<(Array2<f64>, Cache)> {
    if x.ncols() != spec.input_dim() {
        return Err(Error::Shape {
            expected: vec![x.nrows(), spec.input_dim()],
            got: x.shape().to_vec(),
        });
    }
    let (batch, h, w) = (x.nrows(), spec.height, spec.width);
    let pixels = batch * h * w;
    let emb = TimeEmbedding::new(spec.embed_dim)?.encode(t);
    let mut act = Array2::zeros((pixels, spec.channels + spec.embed_dim));
    act.slice_mut(s![.., ..spec.channels]).assign(&to_pixels(spec, &x));
    for (j, e) in emb.iter().enumerate() {
        act.column_mut(spec.channels + j).fill(*e);
    }

    let n_layers = spec.hidden_channels.len() + 1;
    let mut cache = Cache {
        cols: Vec::with_capacity(n_layers),
        pre: Vec::with_capacity(n_layers - 1),
    };
    for l in 0..n_layers {
        let cols = im2col(&act, batch, h, w);
        let mut a = cols.dot(&kernel_matrix(params, l).t());
        a += params.at(2 * l + 1);
        cache.cols.push(cols);
        if l + 1 < n_layers {
            act = a.mapv(silu);
            cache.pre.push(a);
        } else {
            act = a;
        }
    }
    Ok((from_pixels(spec, &act, batch), cache))
}

pub(crate) fn forward(
    spec: &ConvSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    forward_cached(spec, params, x, t).map(|(out, _)| out)
}

pub(crate) fn backward(
    spec: &ConvSpec,
    params: &ParamSet,
    x: ArrayView2<f64>,
    t: usize,
    grad_out: ArrayView2<f64>,
) -> Result<ParamSet> {
    if grad_out.shape() != x.shape() {
        return Err(Error::Shape {
            expected: x.shape().to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let (_, cache) = forward_cached(spec, params, x, t)?;
    let (batch, h, w) = (x.nrows(), spec.height, spec.width);
    let mut grads = params.zeros_like();
    let mut g = to_pixels(spec, &grad_out);
    let n_layers = cache.cols.len();
    for l in (0..n_layers).rev() {
        if l + 1 < n_layers {
            g.zip_mut_with(&cache.pre[l], |gv, &a| *gv *= silu_grad(a));
        }
        let dw = g.t().dot(&cache.cols[l]);
        let shape = params.at(2 * l).raw_dim();
        grads
            .at_mut(2 * l)
            .assign(&dw.into_shape_with_order(shape).expect("kernel shape"));
        grads
            .at_mut(2 * l + 1)
            .assign(&g.sum_axis(Axis(0)).into_dyn());
        if l > 0 {
            let dcols = g.dot(&kernel_matrix(params, l));
            let c_in = params.at(2 * l).shape()[1];
            g = col2im(&dcols, c_in, batch, h, w);
        }
    }
    Ok(grads)
}
