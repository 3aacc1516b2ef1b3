//! Small parameterized building blocks shared by the model stages.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `weight` is stored `(in, out)` so the forward pass is `x W + b`.
    pub fn new<S: Scalar>(params: &mut ParamSet<S>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, gelu_follows: bool) -> Self {
        let w = if gelu_follows { init.kaiming(&[fan_in, fan_out], fan_in) } else { init.lecun(&[fan_in, fan_out], fan_in) };
        Linear { weight: params.add(format!("{name}.weight"), w), bias: params.add(format!("{name}.bias"), Tensor::zeros([fan_out])) }
    }

    /// Applies the map to the last axis of any-rank `x`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(params: &mut ParamSet<S>, name: &str, width: usize) -> Self {
        LayerNorm { gain: params.add(format!("{name}.gain"), Tensor::ones([width])), bias: params.add(format!("{name}.bias"), Tensor::zeros([width])) }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var, eps: S) -> Result<Var> {
        g.layer_norm(x, p[self.gain], p[self.bias], eps)
    }
}
