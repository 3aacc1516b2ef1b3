//! Feature fusion search over the backbone pyramid.
//!
//! Every bank layer is first aligned to the geometry of the last one. Layers
//! are then updated in order, each one becoming a softmax-weighted mixture of
//! fusion operators applied to every earlier (already updated) layer and the
//! layer itself. The last updated layer is blended with the raw last layer
//! through a learnable `gamma`.

use std::fmt::Write as _;

use crate::backbone::FeatureBank;
use crate::config::{FusionOption, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered layer pairs `(i, j)` with `i < j < depth`, lexicographic.
pub fn layer_pairs(depth: usize) -> Vec<(usize, usize)> {
    (0..depth).flat_map(|i| (i + 1..depth).map(move |j| (i, j))).collect()
}

/// Row of `(i, j)` in the weight matrix.
pub fn pair_row(depth: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < depth);
    i * (2 * depth - i - 1) / 2 + (j - i - 1)
}

pub fn fuse_pair<S: Scalar>(g: &mut Graph<S>, option: FusionOption, fi: Var, fj: Var) -> Result<Var> {
    if g.shape(fi) != g.shape(fj) {
        return Err(Error::dim("fuse_pair", g.shape(fi), g.shape(fj)));
    }
    match option {
        FusionOption::Sum => g.add(fi, fj),
        FusionOption::GpLow => {
            let pooled = g.global_avg_pool_spatial(fi)?;
            let gate = g.sigmoid(pooled);
            let gated = g.mul_channel(fj, gate)?;
            g.add(gated, fi)
        }
        FusionOption::GpHigh => {
            let pooled = g.global_avg_pool_spatial(fj)?;
            let gate = g.sigmoid(pooled);
            let gated = g.mul_channel(fi, gate)?;
            g.add(gated, fj)
        }
    }
}

/// `sum_o weights[row, o] * fuse_pair(options[o], fi, fj)`.
///
/// `weights` is the already softmaxed `(pairs, options)` matrix.
pub fn weighted_fusion<S: Scalar>(
    g: &mut Graph<S>,
    fi: Var,
    fj: Var,
    weights: Var,
    row: usize,
    options: &[FusionOption],
) -> Result<Var> {
    let n = options.len();
    if g.shape(weights).len() != 2 || g.shape(weights)[1] != n || row >= g.shape(weights)[0] {
        return Err(Error::dim("weighted_fusion", g.shape(weights), &[row + 1, n]));
    }
    let mut acc: Option<Var> = None;
    for (o, &option) in options.iter().enumerate() {
        let fused = fuse_pair(g, option, fi, fj)?;
        let term = g.scale_by(fused, weights, row * n + o)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Config("fusion needs at least one option".into()))
}

/// Sequential update: layer `j` becomes the sum over `i < j` of the weighted
/// fusion of updated layer `i` with aligned layer `j`. Layer 0 is unchanged.
pub fn update_layers<S: Scalar>(g: &mut Graph<S>, aligned: &[Var], weights: Var, options: &[FusionOption]) -> Result<Vec<Var>> {
    let depth = aligned.len();
    let mut updated = vec![aligned[0]];
    for j in 1..depth {
        let mut acc: Option<Var> = None;
        for i in 0..j {
            let term = weighted_fusion(g, updated[i], aligned[j], weights, pair_row(depth, i, j), options)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
        updated.push(acc.expect("j >= 1 has at least one predecessor"));
    }
    Ok(updated)
}

/// `(1 - gamma) * fused + gamma * raw_last`.
pub fn spatial_output<S: Scalar>(g: &mut Graph<S>, fused: Var, raw_last: Var, gamma: Var) -> Result<Var> {
    let gv = g.value(gamma).item().as_f64();
    if !(0.0..=1.0).contains(&gv) {
        return Err(Error::Contract(format!("gamma {gv} outside [0, 1]")));
    }
    g.mix(fused, raw_last, gamma)
}

#[derive(Clone, Debug)]
pub struct AlignConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Ffas {
    /// One projection per non-final layer.
    pub align: Vec<AlignConv>,
    /// Option logits, `(pairs, options)`.
    pub alpha: ParamId,
    pub gamma: ParamId,
    pub options: Vec<FusionOption>,
    depth: usize,
}

impl Ffas {
    pub fn new<S: Scalar>(config: &ModelConfig, params: &mut ParamSet<S>, init: &mut Init) -> Self {
        let depth = config.depth();
        let c_last = config.last_channels();
        let align = config.channels[..depth - 1]
            .iter()
            .enumerate()
            .map(|(i, &c)| AlignConv {
                kernel: params.add(format!("ffas.align.{i}.kernel"), init.lecun(&[c_last, c, 3, 3], c * 9)),
                bias: params.add(format!("ffas.align.{i}.bias"), Tensor::zeros([c_last])),
            })
            .collect();
        let options = config.ffas.options.clone();
        let alpha = params.add("ffas.alpha", Tensor::zeros([layer_pairs(depth).len(), options.len()]));
        params.set_trainable(alpha, config.ffas.search);
        let gamma = params.add_clamped("ffas.gamma", Tensor::scalar(S::lit(config.gamma_init)), 0.0, 1.0);
        Ffas { align, alpha, gamma, options, depth }
    }

    /// Maps every layer onto `(B, C_L, H_L, W_L)`; the last layer passes through.
    pub fn align_features<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, bank: &FeatureBank) -> Result<Vec<Var>> {
        if bank.layers.len() != self.depth {
            return Err(Error::Contract(format!("bank has {} layers, fusion expects {}", bank.layers.len(), self.depth)));
        }
        let last = bank.last();
        let (hl, wl) = (g.shape(last)[2], g.shape(last)[3]);
        let mut out = Vec::with_capacity(self.depth);
        for (layer, conv) in bank.layers.iter().zip(&self.align) {
            let (h, w) = (g.shape(*layer)[2], g.shape(*layer)[3]);
            if h % hl != 0 || w % wl != 0 || h / hl != w / wl {
                return Err(Error::Config(format!("layer {h}x{w} cannot be aligned to {hl}x{wl} with an integer stride")));
            }
            let y = g.conv3x3(*layer, p[conv.kernel], h / hl)?;
            out.push(g.add_channel_bias(y, p[conv.bias])?);
        }
        out.push(last);
        Ok(out)
    }

    /// Softmaxed option weights, `(pairs, options)`.
    pub fn weights<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound) -> Var {
        g.softmax_lastdim(p[self.alpha])
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, bank: &FeatureBank) -> Result<Var> {
        let aligned = self.align_features(g, p, bank)?;
        let weights = self.weights(g, p);
        let updated = update_layers(g, &aligned, weights, &self.options)?;
        spatial_output(g, *updated.last().expect("depth >= 2"), bank.last(), p[self.gamma])
    }

    pub fn search_weights<S: Scalar>(&self, params: &ParamSet<S>) -> SearchWeights {
        let alpha = params.value(self.alpha);
        let n = self.options.len();
        let rows = layer_pairs(self.depth)
            .into_iter()
            .zip(alpha.data().chunks(n))
            .map(|((i, j), logits)| {
                let logits: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                let mut weights = [0.0; 3];
                for (o, e) in self.options.iter().zip(exp) {
                    weights[*o as usize] = e / total;
                }
                SearchRow { i: i + 1, j: j + 1, weights }
            })
            .collect();
        SearchWeights { rows }
    }
}

/// Softmaxed fusion weights of one layer pair, layers numbered from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchRow {
    pub i: usize,
    pub j: usize,
    /// Indexed by [`FusionOption`]; disabled options are 0.
    pub weights: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchWeights {
    pub rows: Vec<SearchRow>,
}

impl SearchWeights {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,w_sum,w_gp_low,w_gp_high\n");
        for r in &self.rows {
            let [a, b, c] = r.weights;
            writeln!(out, "{},{},{a},{b},{c}", r.i, r.j).expect("write to String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_rows_are_lexicographic() {
        for depth in 2..6 {
            for (row, (i, j)) in layer_pairs(depth).into_iter().enumerate() {
                assert_eq!(pair_row(depth, i, j), row);
            }
        }
        assert_eq!(layer_pairs(4), [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn equal_init_reports_thirds() {
        let mut ps = ParamSet::<f64>::default();
        let f = Ffas::new(&ModelConfig::default(), &mut ps, &mut Init::new(0));
        let report = f.search_weights(&ps);
        assert_eq!(report.rows.len(), 6);
        for r in &report.rows {
            for w in r.weights {
                assert!((w - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("i,j,w_sum,w_gp_low,w_gp_high\n1,2,"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn option_subset_reports_zero_for_disabled() {
        let mut cfg = ModelConfig::default();
        cfg.ffas.options = vec![FusionOption::GpHigh];
        let mut ps = ParamSet::<f64>::default();
        let f = Ffas::new(&cfg, &mut ps, &mut Init::new(0));
        for r in f.search_weights(&ps).rows {
            assert_eq!(r.weights, [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn gamma_out_of_range_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([1, 1, 1, 1]));
        let gamma = g.constant(Tensor::scalar(1.5));
        assert!(matches!(spatial_output(&mut g, a, a, gamma), Err(Error::Contract(_))));
    }
}
