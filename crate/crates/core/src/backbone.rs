//! Convolutional feature pyramid.

use crate::config::ModelConfig;
use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-stage features, layer `i` shaped `(N*T, C_i, H_i, W_i)`.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    pub layers: Vec<Var>,
}

impl FeatureBank {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("bank has at least two layers")
    }
}

#[derive(Clone, Debug)]
pub struct ConvStage {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

/// `conv3x3 -> bias -> gelu` stages; the first keeps resolution, the rest halve it.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<ConvStage>,
    total_stride: usize,
}

impl Backbone {
    pub fn new<S: Scalar>(config: &ModelConfig, params: &mut ParamSet<S>, init: &mut Init) -> Self {
        let mut cin = CHANNELS;
        let stages = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let kernel = params.add(format!("backbone.{i}.kernel"), init.kaiming(&[cout, cin, 3, 3], cin * 9));
                let bias = params.add(format!("backbone.{i}.bias"), Tensor::zeros([cout]));
                cin = cout;
                ConvStage { kernel, bias, stride: if i == 0 { 1 } else { 2 } }
            })
            .collect();
        Backbone { stages, total_stride: config.total_stride() }
    }

    /// Runs `(N, T, 3, H, W)` videos through every stage.
    pub fn extract<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, videos: Var) -> Result<FeatureBank> {
        let shape = g.shape(videos).to_vec();
        let &[n, t, c, h, w] = shape.as_slice() else {
            return Err(Error::dim("extract", &shape, &[0, 0, CHANNELS, 0, 0]));
        };
        if c != CHANNELS {
            return Err(Error::dim("extract", &shape, &[n, t, CHANNELS, h, w]));
        }
        let s = self.total_stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!("input {h}x{w} is not divisible by the backbone stride {s}")));
        }
        let mut x = g.reshape(videos, [n * t, c, h, w])?;
        let mut layers = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let y = g.conv3x3(x, p[stage.kernel], stage.stride)?;
            let y = g.add_channel_bias(y, p[stage.bias])?;
            x = g.gelu(y);
            layers.push(x);
        }
        Ok(FeatureBank { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(cfg: &ModelConfig) -> (Backbone, ParamSet<f64>) {
        let mut ps = ParamSet::default();
        let bb = Backbone::new(cfg, &mut ps, &mut Init::new(1));
        (bb, ps)
    }

    #[test]
    fn default_bank_shapes() {
        let cfg = ModelConfig::default();
        let (bb, ps) = setup(&cfg);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn([1, 8, 3, 32, 32], |i| (i as f64 * 0.01).sin()));
        let bank = bb.extract(&mut g, &p, x).unwrap();
        let shapes: Vec<&[usize]> = bank.layers.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(shapes, [&[8, 8, 32, 32][..], &[8, 16, 16, 16], &[8, 32, 8, 8], &[8, 64, 4, 4]]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_bank() {
        let cfg = ModelConfig::default();
        let (bb, ps) = setup(&cfg);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 2, 3, 32, 32]));
        let bank = bb.extract(&mut g, &p, x).unwrap();
        for &l in &bank.layers {
            assert!(g.value(l).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let cfg = ModelConfig::default();
        let (bb, ps) = setup(&cfg);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Tensor::zeros([1, 1, 3, 30, 32]));
        assert!(matches!(bb.extract(&mut g, &p, x), Err(Error::Config(_))));
    }
}
