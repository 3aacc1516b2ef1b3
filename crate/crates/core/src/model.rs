//! The full network: backbone, fusion search, temporal modules and matcher.

use crate::backbone::Backbone;
use crate::config::{IntegrationMode, ModelConfig};
use crate::data::{Episode, SyntheticVideo, CHANNELS};
use crate::error::{Error, Result};
use crate::ffas::{Ffas, SearchWeights};
use crate::graph::{Graph, Var};
use crate::ltmm::Ltmm;
use crate::matcher::{episode_loss_and_prediction, frame_representations, EpisodeLayout, Matcher};
use crate::params::{Bound, Init, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::stmm::{temporal_integrate, Stmm};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model<S> {
    config: ModelConfig,
    pub params: ParamSet<S>,
    pub backbone: Backbone,
    pub ffas: Option<Ffas>,
    pub ltmm: Option<Ltmm>,
    pub stmm: Option<Stmm>,
    pub lambda: Option<ParamId>,
    pub matcher: Matcher,
}

pub struct EpisodeOutput {
    /// `(queries, way)`.
    pub distances: Var,
    pub loss: Var,
    pub predictions: Vec<usize>,
}

impl<S: Scalar> Model<S> {
    /// Builds and initializes every enabled component from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut init = Init::new(config.init_seed);
        let backbone = Backbone::new(&config, &mut params, &mut init);
        let ffas = config.ffas.enabled.then(|| Ffas::new(&config, &mut params, &mut init));
        let ltmm = config.temporal.uses_ltmm().then(|| Ltmm::new(&config, &mut params, &mut init));
        let stmm = config.temporal.uses_stmm().then(|| Stmm::new(&config, &mut params, &mut init));
        let lambda = (config.temporal == IntegrationMode::ParallelWeighted)
            .then(|| params.add_clamped("temporal.lambda", Tensor::scalar(S::lit(config.lambda_init)), 0.0, 1.0));
        let matcher = Matcher::new(&config, &mut params, &mut init)?;
        Ok(Model { config, params, backbone, ffas, ltmm, stmm, lambda, matcher })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn search_weights(&self) -> Option<SearchWeights> {
        self.ffas.as_ref().map(|f| f.search_weights(&self.params))
    }

    /// Stacks videos into the `(N, T, 3, H, W)` input tensor.
    pub fn batch<'a>(&self, videos: impl IntoIterator<Item = &'a SyntheticVideo>) -> Result<Tensor<S>> {
        let c = &self.config;
        let frame = [c.frames, CHANNELS, c.height, c.width];
        let mut data = Vec::new();
        let mut n = 0;
        for v in videos {
            if v.frames.shape() != frame {
                return Err(Error::dim("batch", v.frames.shape(), &frame));
            }
            data.extend(v.frames.data().iter().map(|&x| S::lit(x)));
            n += 1;
        }
        Tensor::new([n, c.frames, CHANNELS, c.height, c.width], data)
    }

    /// Spatial features `(N * T, C, h, w)`.
    pub fn spatial(&self, g: &mut Graph<S>, p: &Bound, videos: Var) -> Result<Var> {
        let bank = self.backbone.extract(g, p, videos)?;
        match &self.ffas {
            Some(f) => f.forward(g, p, &bank),
            None => Ok(bank.last()),
        }
    }

    /// `(N, T, C, h, w) -> (N, T, C, h, w)` according to the integration mode.
    pub fn temporal(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let lt = |g: &mut Graph<S>, x| self.ltmm.as_ref().expect("mode uses ltmm").forward(g, p, x);
        let st = |g: &mut Graph<S>, x| self.stmm.as_ref().expect("mode uses stmm").forward(g, p, x);
        match self.config.temporal {
            IntegrationMode::None => Ok(x),
            IntegrationMode::StmmOnly => st(g, x),
            IntegrationMode::LtmmOnly => lt(g, x),
            IntegrationMode::LtmmThenStmm => {
                let y = lt(g, x)?;
                st(g, y)
            }
            IntegrationMode::StmmThenLtmm => {
                let y = st(g, x)?;
                lt(g, y)
            }
            IntegrationMode::ParallelSum => {
                let (s, l) = (st(g, x)?, lt(g, x)?);
                g.add(s, l)
            }
            IntegrationMode::ParallelWeighted => {
                let (s, l) = (st(g, x)?, lt(g, x)?);
                temporal_integrate(g, s, l, p[self.lambda.expect("weighted mode has lambda")])
            }
        }
    }

    /// Final per-frame features `(N, T, C, h, w)` for `(N, T, 3, H, W)` videos.
    pub fn features(&self, g: &mut Graph<S>, p: &Bound, videos: Var) -> Result<Var> {
        let n = g.shape(videos)[0];
        let spatial = self.spatial(g, p, videos)?;
        let s = g.shape(spatial).to_vec();
        let x = g.reshape(spatial, [n, self.config.frames, s[1], s[2], s[3]])?;
        self.temporal(g, p, x)
    }

    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, episode: &Episode) -> Result<EpisodeOutput> {
        let layout = EpisodeLayout { way: episode.way, shot: episode.shot, queries: episode.queries.len() };
        let videos = g.constant(self.batch(episode.videos())?);
        let features = self.features(g, p, videos)?;
        let reps = frame_representations(g, features)?;
        let distances = self.matcher.distances(g, p, reps, layout)?.distances;
        let (loss, predictions) = episode_loss_and_prediction(g, distances, &episode.query_targets)?;
        Ok(EpisodeOutput { distances, loss, predictions })
    }
}
