//! Episodic training, evaluation, checkpoints and ablation suites.

mod ablation;
mod checkpoint;

pub use ablation::{ablate, AblationRow, Suite};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt::Write as _;

use crate::config::ModelConfig;
use crate::data::{derive_seed, Catalog, VideoConfig, VideoSource};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const TRAIN_STREAM: u64 = 0x7472_6169_6e;
const EVAL_STREAM: u64 = 0x6576_616c;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub video: VideoConfig,
    pub catalog: Catalog,
    pub episodes: usize,
    pub lr: f64,
    /// Episode counts after which the rate is multiplied by `decay`.
    /// `None` places them at 60% and 85% of `episodes`.
    pub milestones: Option<Vec<usize>>,
    pub decay: f64,
    pub momentum: f64,
    pub way: usize,
    pub shot: usize,
    /// Query videos per episode, spread round-robin over the classes.
    pub queries: usize,
    pub seed: u64,
    pub eval_tasks: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            video: VideoConfig::default(),
            catalog: Catalog::Default,
            episodes: 2000,
            lr: 0.1,
            milestones: None,
            decay: 0.1,
            momentum: 0.0,
            way: 5,
            shot: 1,
            queries: 10,
            seed: 0,
            eval_tasks: 500,
            eval_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn milestones(&self) -> Vec<usize> {
        self.milestones.clone().unwrap_or_else(|| {
            let at = |f: f64| (self.episodes as f64 * f).round() as usize;
            let mut m = vec![at(0.6), at(0.85)];
            m.dedup();
            m
        })
    }

    /// Learning rate used for 1-based episode `episode`.
    pub fn lr_at(&self, episode: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| episode > m).count();
        self.lr * self.decay.powi(passed as i32)
    }

    pub fn source(&self) -> VideoSource {
        VideoSource::Generator { catalog: self.catalog.classes(), video: self.video }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.video.validate()?;
        let (m, v) = (&self.model, &self.video);
        if (m.frames, m.height, m.width) != (v.frames, v.height, v.width) {
            return Err(Error::Config(format!(
                "model expects {}x{}x{} videos but the generator makes {}x{}x{}",
                m.frames, m.height, m.width, v.frames, v.height, v.width
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.milestones().windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones {:?} must be strictly increasing", self.milestones())));
        }
        if self.way == 0 || self.shot == 0 || self.queries == 0 {
            return Err(Error::Config("way, shot and queries must be positive".into()));
        }
        if self.way > self.catalog.classes().len() {
            return Err(Error::Config(format!("{}-way episodes need more classes than the {} catalog has", self.way, self.catalog.name())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMetrics {
    /// 1-based.
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean query distance to each episode class.
    pub class_distances: Vec<f64>,
    pub lr: f64,
}

pub fn metrics_csv(metrics: &[EpisodeMetrics]) -> String {
    let mut out = String::from("episode,loss,accuracy,lr\n");
    for m in metrics {
        writeln!(out, "{},{},{},{}", m.episode, m.loss, m.accuracy, m.lr).expect("write to String");
    }
    out
}

/// Plain SGD with optional heavy-ball momentum.
pub struct Sgd<S> {
    momentum: f64,
    velocity: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, params: usize) -> Self {
        Sgd { momentum, velocity: vec![None; params] }
    }

    /// `p -= lr * v` with `v = momentum * v + grad`, then clamps.
    pub fn step(&mut self, model: &mut Model<S>, grads: &[Option<Tensor<S>>], lr: f64) {
        let (lr, mu) = (S::lit(lr), S::lit(self.momentum));
        for ((id, param), grad) in model.params.iter_mut().zip(grads) {
            let (Some(grad), true) = (grad, param.trainable) else { continue };
            let update = if self.momentum == 0.0 {
                grad.data().to_vec()
            } else {
                let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
                for (vi, &gi) in v.data_mut().iter_mut().zip(grad.data()) {
                    *vi = mu * *vi + gi;
                }
                v.data().to_vec()
            };
            for (p, u) in param.value.data_mut().iter_mut().zip(update) {
                *p -= lr * u;
            }
        }
        model.params.apply_clamps();
    }
}

/// Runs one episode forward and backward. Returns metrics (without `lr`)
/// and the gradient of every parameter.
pub fn episode_step<S: Scalar>(model: &Model<S>, episode: &crate::data::Episode, index: usize) -> Result<(EpisodeMetrics, Vec<Option<Tensor<S>>>)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let out = model.forward(&mut g, &p, episode)?;
    let loss = g.value(out.loss).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::Divergence { episode: index, report: model.params.norm_report() });
    }
    let grads = g.backward(out.loss)?;
    let per_param = p.vars().iter().map(|&v| grads.get(v).cloned()).collect();
    Ok((episode_metrics(&g, &out, episode, index), per_param))
}

fn episode_metrics<S: Scalar>(g: &Graph<S>, out: &crate::model::EpisodeOutput, episode: &crate::data::Episode, index: usize) -> EpisodeMetrics {
    let correct = out.predictions.iter().zip(&episode.query_targets).filter(|(p, t)| p == t).count();
    let d = g.value(out.distances);
    let q = episode.queries.len();
    let class_distances =
        (0..episode.way).map(|k| (0..q).map(|i| d.data()[i * episode.way + k].as_f64()).sum::<f64>() / q as f64).collect();
    EpisodeMetrics {
        episode: index,
        loss: g.value(out.loss).item().as_f64(),
        accuracy: correct as f64 / q as f64,
        class_distances,
        lr: 0.0,
    }
}

/// Trains `model` in place. `observe` sees every episode's metrics as they
/// are produced.
pub fn train_model<S: Scalar>(
    model: &mut Model<S>,
    config: &TrainConfig,
    source: &VideoSource,
    mut observe: impl FnMut(&EpisodeMetrics),
) -> Result<Vec<EpisodeMetrics>> {
    config.validate()?;
    let mut sgd = Sgd::new(config.momentum, model.params.len());
    let mut log = Vec::with_capacity(config.episodes);
    for e in 1..=config.episodes {
        let episode = source.sample_episode(config.way, config.shot, config.queries, derive_seed(&[config.seed, TRAIN_STREAM, e as u64]))?;
        let (mut metrics, grads) = episode_step(model, &episode, e)?;
        metrics.lr = config.lr_at(e);
        sgd.step(model, &grads, metrics.lr);
        observe(&metrics);
        log.push(metrics);
    }
    Ok(log)
}

/// Builds a model from `config.model` and trains it on the configured generator.
pub fn train(config: &TrainConfig) -> Result<(Model<f64>, Vec<EpisodeMetrics>)> {
    let mut model = Model::new(config.model.clone())?;
    let log = train_model(&mut model, config, &config.source(), |_| {})?;
    Ok((model, log))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    /// Standard error of the mean over tasks.
    pub stderr: f64,
    pub tasks: usize,
}

/// Mean query accuracy over `tasks` episodes drawn from a stream disjoint
/// from training. No gradients are recorded.
pub fn evaluate<S: Scalar>(model: &Model<S>, config: &TrainConfig, source: &VideoSource, tasks: usize, seed: u64) -> Result<EvalResult> {
    let mut accs = Vec::with_capacity(tasks);
    for task in 0..tasks {
        let episode = source.sample_episode(config.way, config.shot, config.queries, derive_seed(&[seed, EVAL_STREAM, task as u64]))?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let out = model.forward(&mut g, &p, &episode)?;
        accs.push(episode_metrics(&g, &out, &episode, task).accuracy);
    }
    Ok(summarize(&accs))
}

fn summarize(values: &[f64]) -> EvalResult {
    let n = values.len();
    if n == 0 {
        return EvalResult { mean: f64::NAN, stderr: f64::NAN, tasks: 0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    EvalResult { mean, stderr, tasks: n }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_contract() {
        let cfg = TrainConfig { lr: 0.01, milestones: Some(vec![100]), decay: 0.1, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(1), 0.01);
        assert_eq!(cfg.lr_at(100), 0.01);
        assert!((cfg.lr_at(101) - 0.001).abs() < 1e-18);
        assert!((cfg.lr_at(5000) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn default_milestones() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.milestones(), [1200, 1700]);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_schedules() {
        let bad = [
            TrainConfig { milestones: Some(vec![10, 10]), ..TrainConfig::default() },
            TrainConfig { decay: 0.0, ..TrainConfig::default() },
            TrainConfig { decay: 1.5, ..TrainConfig::default() },
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { way: 16, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn summary_statistics() {
        let r = summarize(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.mean, 0.5);
        assert!((r.stderr - (1.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }
}
