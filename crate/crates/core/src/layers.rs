//! Parameter bundles for affine maps and temporal convolutions.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `x·W + b` with `W` stored `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, output: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), glorot_uniform(rng, &[input, output], input, output), true)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]), true)?;
        Ok(Linear { w, b, input, output })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Temporal convolution with filters stored `out × width × in`.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
    pub stride: usize,
    pub input: usize,
    pub output: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        width: usize,
        stride: usize,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            glorot_uniform(rng, &[output, width, input], width * input, output),
            true,
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[output]), true)?;
        Ok(Conv1d {
            w,
            b,
            width,
            stride,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, b, self.stride)
    }

    /// Output length for `t` input steps, or `None` if the kernel does not fit.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        (t >= self.width).then(|| (t - self.width) / self.stride + 1)
    }
}
