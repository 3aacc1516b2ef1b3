//! Finite-difference gradient suite over every differentiable operation,
//! every model stage and the full episode loss on a tiny configuration.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::data::{derive_seed, sample_episode, Catalog, Episode, VideoConfig};
use crate::error::Result;
use crate::ffas::Ffas;
use crate::gradcheck::{CheckReport, GradCheck};
use crate::graph::Var;
use crate::ltmm::Ltmm;
use crate::matcher::{frame_representations, EpisodeLayout, Matcher};
use crate::model::Model;
use crate::params::{Bound, Init, ParamSet};
use crate::stmm::Stmm;
use crate::{Graph, Tensor};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: CheckReport,
    pub tolerance: f64,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `sum(w * y)` with fixed pseudo-random `w`.
pub fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(y), derive_seed(&[seed, 0x7265])));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub fn tiny_video() -> VideoConfig {
    let m = ModelConfig::tiny();
    VideoConfig { frames: m.frames, height: m.height, width: m.width, radius: 2, step: 2, noise: 0.05 }
}

/// A 2-way 1-shot episode with a single query at the tiny geometry.
pub fn tiny_episode(seed: u64) -> Result<Episode> {
    sample_episode(&Catalog::Default.classes(), 2, 1, 1, seed, &tiny_video())
}

type OpFn = fn(&mut Graph, &[Var], u64) -> Result<Var>;

/// `(name, input shapes, loss builder)` for every differentiable op.
fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    fn s(v: &[&[usize]]) -> Vec<Vec<usize>> {
        v.iter().map(|x| x.to_vec()).collect()
    }
    vec![
        ("add", s(&[&[3, 4], &[3, 4]]), |g, v, k| { let y = g.add(v[0], v[1])?; readout(g, y, k) }),
        ("sub", s(&[&[3, 4], &[3, 4]]), |g, v, k| { let y = g.sub(v[0], v[1])?; readout(g, y, k) }),
        ("mul", s(&[&[3, 4], &[3, 4]]), |g, v, k| { let y = g.mul(v[0], v[1])?; readout(g, y, k) }),
        ("scale", s(&[&[3, 4]]), |g, v, k| { let y = g.scale(v[0], 0.7); readout(g, y, k) }),
        ("mix", s(&[&[3, 4], &[3, 4], &[1]]), |g, v, k| {
            let w = g.sigmoid(v[2]);
            let y = g.mix(v[0], v[1], w)?;
            readout(g, y, k)
        }),
        ("scale_by", s(&[&[3, 4], &[5]]), |g, v, k| { let y = g.scale_by(v[0], v[1], 3)?; readout(g, y, k) }),
        ("sigmoid", s(&[&[3, 4]]), |g, v, k| { let y = g.sigmoid(v[0]); readout(g, y, k) }),
        ("gelu", s(&[&[3, 4]]), |g, v, k| { let y = g.gelu(v[0]); readout(g, y, k) }),
        ("matmul", s(&[&[3, 4], &[4, 2]]), |g, v, k| { let y = g.matmul(v[0], v[1])?; readout(g, y, k) }),
        ("matmul_nt", s(&[&[3, 4], &[2, 4]]), |g, v, k| { let y = g.matmul_nt(v[0], v[1])?; readout(g, y, k) }),
        ("bmm", s(&[&[2, 3, 4], &[2, 4, 2]]), |g, v, k| { let y = g.bmm(v[0], v[1])?; readout(g, y, k) }),
        ("bmm_nt", s(&[&[2, 3, 4], &[2, 5, 4]]), |g, v, k| { let y = g.bmm_nt(v[0], v[1])?; readout(g, y, k) }),
        ("linear", s(&[&[2, 3, 4], &[4, 5], &[5]]), |g, v, k| { let y = g.linear(v[0], v[1], Some(v[2]))?; readout(g, y, k) }),
        ("add_channel_bias", s(&[&[2, 3, 2, 2], &[3]]), |g, v, k| { let y = g.add_channel_bias(v[0], v[1])?; readout(g, y, k) }),
        ("mul_channel", s(&[&[2, 3, 2, 2], &[2, 3]]), |g, v, k| { let y = g.mul_channel(v[0], v[1])?; readout(g, y, k) }),
        ("conv3x3_stride1", s(&[&[2, 2, 5, 5], &[3, 2, 3, 3]]), |g, v, k| { let y = g.conv3x3(v[0], v[1], 1)?; readout(g, y, k) }),
        ("conv3x3_stride2", s(&[&[2, 2, 6, 6], &[3, 2, 3, 3]]), |g, v, k| { let y = g.conv3x3(v[0], v[1], 2)?; readout(g, y, k) }),
        ("depthwise_conv3x3", s(&[&[2, 3, 4, 4], &[3, 3, 3]]), |g, v, k| { let y = g.depthwise_conv3x3(v[0], v[1])?; readout(g, y, k) }),
        ("depthwise_conv3x3_grouped", s(&[&[4, 2, 4, 4], &[4, 3, 3]]), |g, v, k| {
            let y = g.depthwise_conv3x3_grouped(v[0], v[1], 2)?;
            readout(g, y, k)
        }),
        ("softmax", s(&[&[3, 5]]), |g, v, k| { let y = g.softmax_lastdim(v[0]); readout(g, y, k) }),
        ("layer_norm", s(&[&[3, 6], &[6], &[6]]), |g, v, k| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; readout(g, y, k) }),
        ("global_avg_pool", s(&[&[2, 3, 2, 3]]), |g, v, k| { let y = g.global_avg_pool_spatial(v[0])?; readout(g, y, k) }),
        ("sum", s(&[&[3, 4]]), |g, v, _| { let y = g.mul(v[0], v[0])?; Ok(g.sum(y)) }),
        ("mean", s(&[&[3, 4]]), |g, v, _| { let y = g.mul(v[0], v[0])?; Ok(g.mean(y)) }),
        ("mean_lastdim", s(&[&[3, 4]]), |g, v, k| { let y = g.mean_lastdim(v[0]); readout(g, y, k) }),
        ("l2_norm_lastdim", s(&[&[3, 4]]), |g, v, k| { let y = g.l2_norm_lastdim(v[0]); readout(g, y, k) }),
        ("cross_entropy", s(&[&[4, 3]]), |g, v, _| g.cross_entropy(v[0], &[0, 2, 1, 2])),
        ("reshape", s(&[&[3, 4]]), |g, v, k| { let y = g.reshape(v[0], [2, 6])?; readout(g, y, k) }),
        ("permute", s(&[&[2, 3, 4]]), |g, v, k| { let y = g.permute(v[0], &[2, 0, 1])?; readout(g, y, k) }),
        ("transpose", s(&[&[3, 4]]), |g, v, k| { let y = g.transpose(v[0], 0, 1)?; readout(g, y, k) }),
        ("concat", s(&[&[2, 3], &[2, 2]]), |g, v, k| { let y = g.concat(&[v[0], v[1]], 1)?; readout(g, y, k) }),
        ("narrow", s(&[&[2, 5, 3]]), |g, v, k| { let y = g.narrow(v[0], 1, 1, 3)?; readout(g, y, k) }),
        ("gather_rows", s(&[&[4, 3]]), |g, v, k| { let y = g.gather_rows(v[0], &[3, 0, 3, 1])?; readout(g, y, k) }),
    ]
}

/// Every primitive op against central differences.
pub fn op_checks(seed: u64) -> Result<Vec<NamedCheck>> {
    let gc = GradCheck::default();
    op_table()
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| random(s, derive_seed(&[seed, i as u64]))).collect();
            let report = gc.check(&inputs, |g, v| f(g, v, seed))?;
            Ok(NamedCheck { name, report, tolerance: OP_TOLERANCE })
        })
        .collect()
}

/// Checks `f` with respect to every parameter in `params` plus `extra` inputs.
fn check_with_params(
    params: &ParamSet<f64>,
    extra: &[Tensor],
    f: impl Fn(&mut Graph, &Bound, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, p)| p.value.clone()).collect();
    let n = inputs.len();
    inputs.extend_from_slice(extra);
    GradCheck::default().check(&inputs, |g, vars| f(g, &Bound::from_vars(vars[..n].to_vec()), &vars[n..]))
}

/// Each model stage on its own, then the full episode loss.
pub fn model_checks(seed: u64) -> Result<Vec<NamedCheck>> {
    let tiny = ModelConfig { init_seed: seed, ..ModelConfig::tiny() };
    let mut out = Vec::new();
    let mut push = |name, report| out.push(NamedCheck { name, report, tolerance: MODEL_TOLERANCE });

    let three = ModelConfig { channels: vec![4, 6, 8], ..tiny.clone() };
    {
        let mut ps = ParamSet::default();
        let mut init = Init::new(seed);
        let bb = Backbone::new(&three, &mut ps, &mut init);
        let ff = Ffas::new(&three, &mut ps, &mut init);
        let x = random(&[1, 2, 3, 16, 16], derive_seed(&[seed, 1]));
        push("backbone", check_with_params(&ps, &[], |g, p, _| {
            let x = g.constant(x.clone());
            let bank = bb.extract(g, p, x)?;
            readout(g, bank.last(), seed)
        })?);
        // Perturbed logits so the option weights are not all equal.
        let shape = ps.value(ff.alpha).shape().to_vec();
        *ps.value_mut(ff.alpha) = Tensor::from_fn(shape, |i| (i as f64 * 0.9).sin());
        push("ffas", check_with_params(&ps, &[], |g, p, _| {
            let x = g.constant(x.clone());
            let bank = bb.extract(g, p, x)?;
            let y = ff.forward(g, p, &bank)?;
            readout(g, y, seed)
        })?);
    }
    {
        let cfg = ModelConfig { channels: vec![4, 8], heads: 2, ..tiny.clone() };
        let mut ps = ParamSet::default();
        let lt = Ltmm::new(&cfg, &mut ps, &mut Init::new(seed));
        let x = random(&[1, 4, 8, 2, 2], derive_seed(&[seed, 2]));
        push("ltmm", check_with_params(&ps, &[x], |g, p, v| {
            let y = lt.forward(g, p, v[0])?;
            readout(g, y, seed)
        })?);
    }
    {
        let mut ps = ParamSet::default();
        let st = Stmm::new(&tiny, &mut ps, &mut Init::new(seed));
        let x = random(&[1, 4, 8, 2, 2], derive_seed(&[seed, 3]));
        push("stmm", check_with_params(&ps, &[x], |g, p, v| {
            let y = st.forward(g, p, v[0])?;
            readout(g, y, seed)
        })?);
    }
    {
        let mut ps = ParamSet::default();
        let m = Matcher::new(&tiny, &mut ps, &mut Init::new(seed))?;
        let layout = EpisodeLayout { way: 2, shot: 2, queries: 2 };
        let x = random(&[layout.videos(), 4, 8, 2, 2], derive_seed(&[seed, 4]));
        push("matcher", check_with_params(&ps, &[x], |g, p, v| {
            let reps = frame_representations(g, v[0])?;
            let d = m.distances(g, p, reps, layout)?.distances;
            g.cross_entropy(d, &[0, 1])
        })?);
    }
    {
        let model = Model::<f64>::new(tiny)?;
        let episode = tiny_episode(seed)?;
        push("end_to_end", check_with_params(&model.params, &[], |g, p, _| Ok(model.forward(g, p, &episode)?.loss))?);
    }
    Ok(out)
}
