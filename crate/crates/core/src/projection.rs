//! Two-layer cross-modal projection applied per image token:
//! `H_v = relu(X_v·W1 + b1)·W2 + b2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{linear_backward, linear_forward, relu, relu_backward};
use crate::optim::{Module, Parameter};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_lm: usize,
}

impl Default for ProjectionDims {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_hidden: 64,
            d_lm: 48,
        }
    }
}

impl ProjectionDims {
    pub fn param_count(&self) -> usize {
        self.d_in * self.d_hidden + self.d_hidden + self.d_hidden * self.d_lm + self.d_lm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectionCache {
    input: Tensor,
    pre_act: Tensor,
    hidden: Tensor,
}

impl ProjectionParams {
    pub fn init(dims: ProjectionDims, rng: RngState) -> Result<Self> {
        if dims.d_in == 0 || dims.d_hidden == 0 || dims.d_lm == 0 {
            return Err(Error::Parameter(format!("projection dims must be >= 1: {dims:?}")));
        }
        let mut g = rng.generator();
        Ok(Self {
            w1: Parameter::fan_in_uniform("proj.w1", &[dims.d_in, dims.d_hidden], dims.d_in, &mut g),
            b1: Parameter::zeros("proj.b1", &[dims.d_hidden]),
            w2: Parameter::fan_in_uniform("proj.w2", &[dims.d_hidden, dims.d_lm], dims.d_hidden, &mut g),
            b2: Parameter::zeros("proj.b2", &[dims.d_lm]),
        })
    }

    pub fn dims(&self) -> ProjectionDims {
        let s1 = self.w1.value.shape();
        ProjectionDims {
            d_in: s1[0],
            d_hidden: s1[1],
            d_lm: self.w2.value.shape()[1],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ProjectionCache)> {
        let (_, d) = x.dims2()?;
        if d != self.dims().d_in {
            return Err(Error::shape("project", x.shape(), self.w1.value.shape()));
        }
        let pre_act = linear_forward(x, &self.w1.value, &self.b1.value)?;
        let hidden = relu(&pre_act);
        let out = linear_forward(&hidden, &self.w2.value, &self.b2.value)?;
        Ok((
            out,
            ProjectionCache {
                input: x.clone(),
                pre_act,
                hidden,
            },
        ))
    }

    /// Projects `x` (`T×D_in`) to `T×D_lm`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// input tokens.
    pub fn backward(&mut self, cache: &ProjectionCache, grad_out: &Tensor) -> Result<Tensor> {
        let g_hidden = linear_backward(
            &cache.hidden,
            &self.w2.value,
            grad_out,
            &mut self.w2.grad,
            &mut self.b2.grad,
        )?;
        let g_pre = relu_backward(&cache.pre_act, &g_hidden);
        linear_backward(&cache.input, &self.w1.value, &g_pre, &mut self.w1.grad, &mut self.b1.grad)
    }
}

impl Module for ProjectionParams {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}
