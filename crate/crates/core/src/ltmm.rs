//! Long-term temporal modeling: self-attention across frames at every
//! spatial location, followed by a residual feed-forward block.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bound, Init, ParamSet};
use crate::scalar::Scalar;

/// Pre-norm multi-head self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct Ltmm {
    pub blocks: Vec<AttentionBlock>,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
    eps: f64,
}

/// Result of a forward pass with the attention maps kept for inspection.
pub struct LtmmTrace {
    pub output: Var,
    /// Per block, `(sequences * heads, T, T)` rows summing to one.
    pub attention: Vec<Var>,
}

impl Ltmm {
    pub fn new<S: Scalar>(config: &ModelConfig, params: &mut ParamSet<S>, init: &mut Init) -> Self {
        let c = config.last_channels();
        let blocks = (0..config.attention_layers)
            .map(|b| {
                let name = |part: &str| format!("ltmm.block{b}.{part}");
                AttentionBlock {
                    norm: LayerNorm::new(params, &name("norm"), c),
                    query: Linear::new(params, init, &name("query"), c, c, false),
                    key: Linear::new(params, init, &name("key"), c, c, false),
                    value: Linear::new(params, init, &name("value"), c, c, false),
                    output: Linear::new(params, init, &name("output"), c, c, false),
                }
            })
            .collect();
        let hidden = c * config.ffn_mult;
        Ltmm {
            blocks,
            ffn_norm: LayerNorm::new(params, "ltmm.ffn.norm", c),
            ffn_in: Linear::new(params, init, "ltmm.ffn.in", c, hidden, true),
            ffn_out: Linear::new(params, init, "ltmm.ffn.out", hidden, c, false),
            heads: config.heads,
            eps: config.ln_eps,
        }
    }

    /// `(N, T, C, H, W) -> (N, T, C, H, W)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, x)?.output)
    }

    pub fn forward_traced<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<LtmmTrace> {
        let shape = g.shape(x).to_vec();
        let &[n, t, c, h, w] = shape.as_slice() else {
            return Err(Error::dim("ltmm", &shape, &[0; 5]));
        };
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Config(format!("{c} channels cannot be split into {} heads", self.heads)));
        }
        let eps = S::lit(self.eps);
        let seq = g.permute(x, &[0, 3, 4, 1, 2])?;
        let mut seq = g.reshape(seq, [n * h * w, t, c])?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let normed = block.norm.forward(g, p, seq, eps)?;
            let (attended, attn) = self.attend(g, p, block, normed)?;
            attention.push(attn);
            seq = g.add(seq, attended)?;
        }
        let normed = self.ffn_norm.forward(g, p, seq, eps)?;
        let hidden = self.ffn_in.forward(g, p, normed)?;
        let hidden = g.gelu(hidden);
        let refined = self.ffn_out.forward(g, p, hidden)?;
        let seq = g.add(seq, refined)?;
        let out = g.reshape(seq, [n, h, w, t, c])?;
        let output = g.permute(out, &[0, 3, 4, 1, 2])?;
        Ok(LtmmTrace { output, attention })
    }

    fn attend<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, block: &AttentionBlock, x: Var) -> Result<(Var, Var)> {
        let (b, t, c) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let heads = self.heads;
        let dh = c / heads;
        let split = |g: &mut Graph<S>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(g, p, x)?;
            let y = g.reshape(y, [b, t, heads, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, [b * heads, t, dh])
        };
        let q = split(g, &block.query)?;
        let k = split(g, &block.key)?;
        let v = split(g, &block.value)?;
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, S::one() / S::lit(dh as f64).sqrt());
        let attn = g.softmax_lastdim(scores);
        let mixed = g.bmm(attn, v)?;
        let mixed = g.reshape(mixed, [b, heads, t, dh])?;
        let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = g.reshape(mixed, [b, t, c])?;
        Ok((block.output.forward(g, p, mixed)?, attn))
    }
}
