//! TOML run configuration. Every key is optional and overrides the library
//! default; command-line flags override the file in turn.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sloshnet::config::{FusionOption, IntegrationMode};
use sloshnet::data::{read_dataset, Catalog, VideoSource};
use sloshnet::trainer::TrainConfig;
use sloshnet::{Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub frames: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub heads: Option<usize>,
    pub attention_layers: Option<usize>,
    pub ffn_mult: Option<usize>,
    pub fold: Option<usize>,
    pub gate_reduction: Option<usize>,
    pub embed_dim: Option<usize>,
    pub omega: Option<Vec<usize>>,
    pub gamma_init: Option<f64>,
    pub lambda_init: Option<f64>,
    pub ln_eps: Option<f64>,
    pub ffas: Option<bool>,
    pub fusion_options: Option<Vec<String>>,
    pub search: Option<bool>,
    pub temporal: Option<String>,
    pub init_seed: Option<u64>,

    pub radius: Option<usize>,
    pub step: Option<usize>,
    pub noise: Option<f64>,
    pub catalog: Option<String>,
    /// Stored dataset to sample episodes from instead of the generator.
    pub dataset: Option<PathBuf>,

    pub episodes: Option<usize>,
    pub lr: Option<f64>,
    pub milestones: Option<Vec<usize>>,
    pub decay: Option<f64>,
    pub momentum: Option<f64>,
    pub way: Option<usize>,
    pub shot: Option<usize>,
    pub queries: Option<usize>,
    pub seed: Option<u64>,
    pub eval_tasks: Option<usize>,
    pub eval_seed: Option<u64>,

    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

macro_rules! set {
    ($($dst:expr => $src:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst = v; })*
    };
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Library defaults with this file's values applied, validated.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        let (m, v) = (&mut c.model, &mut c.video);
        set! {
            m.channels => self.channels,
            m.heads => self.heads,
            m.attention_layers => self.attention_layers,
            m.ffn_mult => self.ffn_mult,
            m.fold => self.fold,
            m.gate_reduction => self.gate_reduction,
            m.embed_dim => self.embed_dim,
            m.omega => self.omega,
            m.gamma_init => self.gamma_init,
            m.lambda_init => self.lambda_init,
            m.ln_eps => self.ln_eps,
            m.ffas.enabled => self.ffas,
            m.ffas.search => self.search,
            m.init_seed => self.init_seed,
            v.radius => self.radius,
            v.step => self.step,
            v.noise => self.noise,
        }
        for (dst_m, dst_v, src) in [(&mut m.height, &mut v.height, self.height), (&mut m.width, &mut v.width, self.width), (&mut m.frames, &mut v.frames, self.frames)] {
            if let Some(x) = src {
                (*dst_m, *dst_v) = (x, x);
            }
        }
        if let Some(opts) = &self.fusion_options {
            m.ffas.options = opts.iter().map(|s| s.parse::<FusionOption>()).collect::<Result<_>>()?;
        }
        if let Some(t) = &self.temporal {
            m.temporal = t.parse::<IntegrationMode>()?;
        }
        if let Some(cat) = &self.catalog {
            c.catalog = cat.parse::<Catalog>()?;
        }
        set! {
            c.episodes => self.episodes,
            c.lr => self.lr,
            c.decay => self.decay,
            c.momentum => self.momentum,
            c.way => self.way,
            c.shot => self.shot,
            c.queries => self.queries,
            c.seed => self.seed,
            c.eval_tasks => self.eval_tasks,
            c.eval_seed => self.eval_seed,
        }
        if self.milestones.is_some() {
            c.milestones = self.milestones.clone();
        }
        c.validate()?;
        Ok(c)
    }

    pub fn source(&self, config: &TrainConfig) -> Result<VideoSource> {
        match &self.dataset {
            None => Ok(config.source()),
            Some(path) => {
                let videos = read_dataset(path)?;
                let m = &config.model;
                let want = [m.frames, sloshnet::data::CHANNELS, m.height, m.width];
                if let Some(v) = videos.iter().find(|v| v.frames.shape() != want) {
                    return Err(Error::Config(format!(
                        "{} holds {:?} videos but the model expects {want:?}",
                        path.display(),
                        v.frames.shape()
                    )));
                }
                Ok(VideoSource::from_videos(videos))
            }
        }
    }
}
