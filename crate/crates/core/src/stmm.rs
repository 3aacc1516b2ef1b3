//! Short-term temporal modeling: staggered differences between refined
//! query and key projections of adjacent frames gate the value projection.
//!
//! Everything here works channel-last, `(N, T, H, W, C)`, except
//! [`Stmm::forward`] which takes and returns `(N, T, C, H, W)` like the other
//! stages.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const TO_CHANNEL_LAST: [usize; 5] = [0, 1, 3, 4, 2];
const TO_CHANNEL_FIRST: [usize; 5] = [0, 1, 4, 2, 3];

fn dims5<S: Scalar>(g: &Graph<S>, x: Var, op: &'static str) -> Result<[usize; 5]> {
    let s = g.shape(x);
    <[usize; 5]>::try_from(s).map_err(|_| Error::dim(op, s, &[0; 5]))
}

/// `(Fq, Fk, Fv) = (F W1, F W2, F W3)` on the channel axis.
pub fn qkv_project<S: Scalar>(g: &mut Graph<S>, x: Var, w1: Var, w2: Var, w3: Var) -> Result<(Var, Var, Var)> {
    Ok((g.linear(x, w1, None)?, g.linear(x, w2, None)?, g.linear(x, w3, None)?))
}

/// Folds `fold` channel groups into the batch axis, applies the channel-wise
/// 3x3 kernels `(C, 3, 3)` and unfolds again.
pub fn fold_and_refine<S: Scalar>(g: &mut Graph<S>, fq: Var, fk: Var, fold: usize, kq: Var, kk: Var) -> Result<(Var, Var)> {
    let [n, t, h, w, c] = dims5(g, fq, "fold_and_refine")?;
    if fold == 0 || c % fold != 0 {
        return Err(Error::Config(format!("{c} channels are not divisible by the fold factor {fold}")));
    }
    let refine = |g: &mut Graph<S>, x: Var, kernel: Var| -> Result<Var> {
        let y = g.permute(x, &TO_CHANNEL_FIRST)?;
        let y = g.reshape(y, [n * t * fold, c / fold, h, w])?;
        let y = g.depthwise_conv3x3_grouped(y, kernel, fold)?;
        let y = g.reshape(y, [n, t, c, h, w])?;
        g.permute(y, &TO_CHANNEL_LAST)
    };
    Ok((refine(g, fq, kq)?, refine(g, fk, kk)?))
}

/// `M[t] = Fq[t] - Fk[t + 1]` for every frame but the last, which is zero.
pub fn staggered_motion<S: Scalar>(g: &mut Graph<S>, fq: Var, fk: Var) -> Result<Var> {
    let [n, t, h, w, c] = dims5(g, fq, "staggered_motion")?;
    if g.shape(fk) != g.shape(fq) {
        return Err(Error::dim("staggered_motion", g.shape(fq), g.shape(fk)));
    }
    if t < 2 {
        return Err(Error::Contract(format!("staggered motion needs at least 2 frames, got {t}")));
    }
    let head = g.narrow(fq, 1, 0, t - 1)?;
    let tail = g.narrow(fk, 1, 1, t - 1)?;
    let diff = g.sub(head, tail)?;
    let pad = g.constant(Tensor::zeros([n, 1, h, w, c]));
    g.concat_time(&[diff, pad])
}

/// `(1 - lambda) * f_st + lambda * f_lt`.
pub fn temporal_integrate<S: Scalar>(g: &mut Graph<S>, f_st: Var, f_lt: Var, lambda: Var) -> Result<Var> {
    let lv = g.value(lambda).item().as_f64();
    if !(0.0..=1.0).contains(&lv) {
        return Err(Error::Contract(format!("lambda {lv} outside [0, 1]")));
    }
    g.mix(f_st, f_lt, lambda)
}

#[derive(Clone, Debug)]
pub struct Stmm {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub k_query: ParamId,
    pub k_key: ParamId,
    pub gate_in: Linear,
    pub gate_out: Linear,
    pub fold: usize,
}

impl Stmm {
    pub fn new<S: Scalar>(config: &ModelConfig, params: &mut ParamSet<S>, init: &mut Init) -> Self {
        let c = config.last_channels();
        let hidden = c / config.gate_reduction;
        Stmm {
            w_query: params.add("stmm.w_query", init.lecun(&[c, c], c)),
            w_key: params.add("stmm.w_key", init.lecun(&[c, c], c)),
            w_value: params.add("stmm.w_value", init.lecun(&[c, c], c)),
            k_query: params.add("stmm.k_query", init.lecun(&[c, 3, 3], 9)),
            k_key: params.add("stmm.k_key", init.lecun(&[c, 3, 3], 9)),
            gate_in: Linear::new(params, init, "stmm.gate_in", c, hidden, true),
            gate_out: Linear::new(params, init, "stmm.gate_out", hidden, c, false),
            fold: config.fold,
        }
    }

    /// `sigmoid(MLP(gelu(MLP(M)))) * Fv`, channel-last.
    pub fn motion_gate<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, motion: Var, fv: Var) -> Result<Var> {
        let h = self.gate_in.forward(g, p, motion)?;
        let h = g.gelu(h);
        let h = self.gate_out.forward(g, p, h)?;
        let gate = g.sigmoid(h);
        g.mul(gate, fv)
    }

    /// Channel-last motion map for `(N, T, H, W, C)` input.
    pub fn motion<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x_cl: Var) -> Result<(Var, Var)> {
        let (fq, fk, fv) = qkv_project(g, x_cl, p[self.w_query], p[self.w_key], p[self.w_value])?;
        let (fq, fk) = fold_and_refine(g, fq, fk, self.fold, p[self.k_query], p[self.k_key])?;
        Ok((staggered_motion(g, fq, fk)?, fv))
    }

    /// `(N, T, C, H, W) -> (N, T, C, H, W)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        dims5(g, x, "stmm")?;
        let x_cl = g.permute(x, &TO_CHANNEL_LAST)?;
        let (motion, fv) = self.motion(g, p, x_cl)?;
        let out = self.motion_gate(g, p, motion, fv)?;
        g.permute(out, &TO_CHANNEL_FIRST)
    }
}
