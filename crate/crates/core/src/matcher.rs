//! Tuple cross-attention prototype matching.
//!
//! Each video becomes a sequence of frame vectors. For every cardinality
//! `omega`, all strictly increasing frame tuples are embedded with a key and
//! a value map. A query tuple attends over every support tuple of a class to
//! build its own prototype, and the class distance is the mean Euclidean
//! distance between query tuple values and their prototypes, summed over the
//! cardinalities.

use itertools::Itertools;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamSet};
use crate::scalar::Scalar;

/// All strictly increasing `omega`-tuples of frame indices, lexicographic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleIndex {
    pub omega: usize,
    pub tuples: Vec<Vec<usize>>,
}

pub fn enumerate_tuples(frames: usize, omega: usize) -> Result<TupleIndex> {
    if omega == 0 || omega > frames {
        return Err(Error::Contract(format!("cardinality {omega} is outside 1..={frames}")));
    }
    Ok(TupleIndex { omega, tuples: (0..frames).combinations(omega).collect() })
}

/// Spatial mean of every frame: `(Nv, T, C, H, W) -> (Nv * T, C)`.
pub fn frame_representations<S: Scalar>(g: &mut Graph<S>, features: Var) -> Result<Var> {
    let s = g.shape(features).to_vec();
    let &[nv, t, c, h, w] = s.as_slice() else {
        return Err(Error::dim("frame_representations", &s, &[0; 5]));
    };
    let flat = g.reshape(features, [nv * t, c, h, w])?;
    g.global_avg_pool_spatial(flat)
}

/// Query-specific prototypes `(nq, D')` and the attention `(nq, ns)` that built them.
pub fn class_prototype<S: Scalar>(g: &mut Graph<S>, query_keys: Var, support_keys: Var, support_values: Var) -> Result<(Var, Var)> {
    let d = g.shape(query_keys).last().copied().unwrap_or(1);
    let scores = g.matmul_nt(query_keys, support_keys)?;
    let scores = g.scale(scores, S::one() / S::lit(d as f64).sqrt());
    let attn = g.softmax_lastdim(scores);
    Ok((g.matmul(attn, support_values)?, attn))
}

/// Cross-entropy over `-distances` and the nearest class per query.
pub fn episode_loss_and_prediction<S: Scalar>(g: &mut Graph<S>, distances: Var, targets: &[usize]) -> Result<(Var, Vec<usize>)> {
    let logits = g.scale(distances, -S::one());
    let loss = g.cross_entropy(logits, targets)?;
    let way = g.shape(distances)[1];
    let predictions = g
        .value(distances)
        .data()
        .chunks(way)
        .map(|row| row.iter().enumerate().fold(0, |best, (k, &d)| if d < row[best] { k } else { best }))
        .collect();
    Ok((loss, predictions))
}

/// Video order inside an episode batch: support class-major, then queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeLayout {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

impl EpisodeLayout {
    pub fn videos(&self) -> usize {
        self.way * self.shot + self.queries
    }
}

#[derive(Clone, Debug)]
pub struct CardinalityHead {
    pub tuples: TupleIndex,
    pub key: Linear,
    pub value: Linear,
}

pub struct MatchTrace {
    /// `(queries, way)`.
    pub distances: Var,
    /// One `(queries * tuples, shot * tuples)` map per cardinality and class.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Matcher {
    pub heads: Vec<CardinalityHead>,
    pub frames: usize,
}

impl Matcher {
    pub fn new<S: Scalar>(config: &ModelConfig, params: &mut ParamSet<S>, init: &mut Init) -> Result<Self> {
        let d = config.last_channels();
        let heads = config
            .omega
            .iter()
            .map(|&omega| {
                Ok(CardinalityHead {
                    tuples: enumerate_tuples(config.frames, omega)?,
                    key: Linear::new(params, init, &format!("matcher.omega{omega}.key"), omega * d, config.embed_dim, false),
                    value: Linear::new(params, init, &format!("matcher.omega{omega}.value"), omega * d, config.embed_dim, false),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Matcher { heads, frames: config.frames })
    }

    /// Concatenated frame vectors of every tuple: `(Nv * tuples, omega * D)`.
    pub fn tuple_matrix<S: Scalar>(&self, g: &mut Graph<S>, reps: Var, index: &TupleIndex) -> Result<Var> {
        let (rows, d) = (g.shape(reps)[0], g.shape(reps)[1]);
        let videos = rows / self.frames;
        let gather: Vec<usize> = (0..videos).flat_map(|v| index.tuples.iter().flatten().map(move |&f| v * self.frames + f)).collect();
        let picked = g.gather_rows(reps, &gather)?;
        g.reshape(picked, [videos * index.tuples.len(), index.omega * d])
    }

    /// Class distances for frame representations `(Nv * T, D)` laid out as `layout`.
    pub fn distances<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, reps: Var, layout: EpisodeLayout) -> Result<MatchTrace> {
        let rows = g.shape(reps)[0];
        if rows != layout.videos() * self.frames {
            return Err(Error::dim("matcher", g.shape(reps), &[layout.videos() * self.frames]));
        }
        let mut total: Option<Var> = None;
        let mut attention = Vec::new();
        for head in &self.heads {
            let nt = head.tuples.tuples.len();
            let tuples = self.tuple_matrix(g, reps, &head.tuples)?;
            let keys = head.key.forward(g, p, tuples)?;
            let values = head.value.forward(g, p, tuples)?;
            let support_rows = layout.way * layout.shot * nt;
            let qk = g.narrow(keys, 0, support_rows, layout.queries * nt)?;
            let qv = g.narrow(values, 0, support_rows, layout.queries * nt)?;
            let mut per_class = Vec::with_capacity(layout.way);
            for k in 0..layout.way {
                let start = k * layout.shot * nt;
                let sk = g.narrow(keys, 0, start, layout.shot * nt)?;
                let sv = g.narrow(values, 0, start, layout.shot * nt)?;
                let (proto, attn) = class_prototype(g, qk, sk, sv)?;
                attention.push(attn);
                let diff = g.sub(qv, proto)?;
                let dist = g.l2_norm_lastdim(diff);
                let dist = g.reshape(dist, [layout.queries, nt])?;
                let dist = g.mean_lastdim(dist);
                per_class.push(g.reshape(dist, [layout.queries, 1])?);
            }
            let d = g.concat(&per_class, 1)?;
            total = Some(match total {
                None => d,
                Some(t) => g.add(t, d)?,
            });
        }
        let distances = total.ok_or_else(|| Error::Config("omega must name at least one cardinality".into()))?;
        Ok(MatchTrace { distances, attention })
    }
}
