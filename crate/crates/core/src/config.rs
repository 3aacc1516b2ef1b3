//! Model architecture configuration.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parameter-free pairwise fusion operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FusionOption {
    Sum,
    GpLow,
    GpHigh,
}

impl FusionOption {
    pub const ALL: [FusionOption; 3] = [FusionOption::Sum, FusionOption::GpLow, FusionOption::GpHigh];

    pub fn name(self) -> &'static str {
        match self {
            FusionOption::Sum => "sum",
            FusionOption::GpLow => "gp_low",
            FusionOption::GpHigh => "gp_high",
        }
    }
}

impl FromStr for FusionOption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionOption::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion option {s:?} (expected sum, gp_low or gp_high)")))
    }
}

/// How the feature-fusion stage is wired.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FfasConfig {
    /// When off, the last backbone layer feeds the temporal stage directly.
    pub enabled: bool,
    /// Candidate operators, kept in `Sum, GpLow, GpHigh` order.
    pub options: Vec<FusionOption>,
    /// Learn the option weights. When off they stay at their equal init.
    pub search: bool,
}

impl Default for FfasConfig {
    fn default() -> Self {
        FfasConfig { enabled: true, options: FusionOption::ALL.to_vec(), search: true }
    }
}

/// How the long-term and short-term temporal modules are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IntegrationMode {
    /// Spatial features go straight to the matcher.
    None,
    StmmOnly,
    LtmmOnly,
    /// LTMM output feeds STMM.
    LtmmThenStmm,
    /// STMM output feeds LTMM.
    StmmThenLtmm,
    /// Unweighted sum of both branches.
    ParallelSum,
    /// `(1 - lambda) * stmm + lambda * ltmm` with learnable `lambda`.
    ParallelWeighted,
}

impl IntegrationMode {
    pub const ALL: [IntegrationMode; 7] = [
        IntegrationMode::None,
        IntegrationMode::StmmOnly,
        IntegrationMode::LtmmOnly,
        IntegrationMode::StmmThenLtmm,
        IntegrationMode::LtmmThenStmm,
        IntegrationMode::ParallelSum,
        IntegrationMode::ParallelWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IntegrationMode::None => "none",
            IntegrationMode::StmmOnly => "stmm_only",
            IntegrationMode::LtmmOnly => "ltmm_only",
            IntegrationMode::LtmmThenStmm => "ltmm_then_stmm",
            IntegrationMode::StmmThenLtmm => "stmm_then_ltmm",
            IntegrationMode::ParallelSum => "parallel_sum",
            IntegrationMode::ParallelWeighted => "parallel_weighted",
        }
    }

    pub fn uses_ltmm(self) -> bool {
        !matches!(self, IntegrationMode::None | IntegrationMode::StmmOnly)
    }

    pub fn uses_stmm(self) -> bool {
        !matches!(self, IntegrationMode::None | IntegrationMode::LtmmOnly)
    }
}

impl fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntegrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IntegrationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown integration mode {s:?}")))
    }
}

/// Every architectural knob of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per video.
    pub frames: usize,
    /// Output channels of each backbone stage. The first stage keeps the
    /// input resolution, every later one halves it.
    pub channels: Vec<usize>,
    pub heads: usize,
    pub attention_layers: usize,
    /// Hidden width multiplier of the long-term feed-forward block.
    pub ffn_mult: usize,
    /// Channel groups folded into the batch axis before the short-term
    /// depthwise convolutions.
    pub fold: usize,
    /// Bottleneck divisor of the motion gate.
    pub gate_reduction: usize,
    /// Tuple embedding width.
    pub embed_dim: usize,
    /// Tuple cardinalities used for matching.
    pub omega: Vec<usize>,
    pub gamma_init: f64,
    pub lambda_init: f64,
    pub ln_eps: f64,
    pub ffas: FfasConfig,
    pub temporal: IntegrationMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            frames: 8,
            channels: vec![8, 16, 32, 64],
            heads: 4,
            attention_layers: 2,
            ffn_mult: 4,
            fold: 16,
            gate_reduction: 4,
            embed_dim: 64,
            omega: vec![1, 2],
            gamma_init: 0.9,
            lambda_init: 0.5,
            ln_eps: 1e-5,
            ffas: FfasConfig::default(),
            temporal: IntegrationMode::ParallelWeighted,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration that still exercises every component.
    pub fn tiny() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            frames: 4,
            channels: vec![4, 8],
            heads: 2,
            attention_layers: 2,
            ffn_mult: 2,
            fold: 2,
            gate_reduction: 4,
            embed_dim: 16,
            omega: vec![1, 2],
            ..ModelConfig::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn last_channels(&self) -> usize {
        *self.channels.last().expect("validated config has channels")
    }

    /// Total downsampling of the backbone.
    pub fn total_stride(&self) -> usize {
        1 << self.channels.len().saturating_sub(1)
    }

    /// Spatial extent `(h, w)` of backbone stage `i`.
    pub fn stage_extent(&self, i: usize) -> (usize, usize) {
        (self.height >> i, self.width >> i)
    }

    pub fn final_extent(&self) -> (usize, usize) {
        (self.height / self.total_stride(), self.width / self.total_stride())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.len() < 2 {
            return bad(format!("backbone needs at least 2 stages, got {}", self.channels.len()));
        }
        if self.channels.contains(&0) {
            return bad("backbone channel counts must be positive".into());
        }
        if self.frames == 0 || self.frames > 255 {
            return bad(format!("frames must be in 1..=255, got {}", self.frames));
        }
        let s = self.total_stride();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(s) || !self.width.is_multiple_of(s) {
            return bad(format!("input {}x{} is not divisible by the backbone stride {s}", self.height, self.width));
        }
        let c = self.last_channels();
        if self.temporal.uses_ltmm() {
            if self.heads == 0 || !c.is_multiple_of(self.heads) {
                return bad(format!("{c} channels cannot be split into {} heads", self.heads));
            }
            if self.ffn_mult == 0 {
                return bad("ffn_mult must be positive".into());
            }
        }
        if self.temporal.uses_stmm() {
            if self.fold == 0 || !c.is_multiple_of(self.fold) {
                return bad(format!("{c} channels are not divisible by the fold factor {}", self.fold));
            }
            if self.gate_reduction == 0 || !c.is_multiple_of(self.gate_reduction) {
                return bad(format!("{c} channels are not divisible by the gate reduction {}", self.gate_reduction));
            }
            if self.frames < 2 {
                return bad("short-term motion needs at least 2 frames".into());
            }
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.omega.is_empty() {
            return bad("omega must name at least one cardinality".into());
        }
        let mut seen = self.omega.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.omega.len() {
            return bad(format!("omega {:?} repeats a cardinality", self.omega));
        }
        if let Some(&w) = self.omega.iter().find(|&&w| w == 0 || w > self.frames) {
            return bad(format!("cardinality {w} is outside 1..={}", self.frames));
        }
        for (name, v) in [("gamma_init", self.gamma_init), ("lambda_init", self.lambda_init)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        if self.ffas.enabled {
            if self.ffas.options.is_empty() {
                return bad("fusion search needs at least one option".into());
            }
            let mut opts = self.ffas.options.clone();
            opts.sort_unstable();
            opts.dedup();
            if opts != self.ffas.options {
                return bad(format!("fusion options {:?} must be distinct and in sum, gp_low, gp_high order", self.ffas.options));
            }
        }
        Ok(())
    }

    /// Canonical text form covering every field.
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let opts = self.ffas.options.iter().map(|o| o.name()).collect::<Vec<_>>().join(",");
        format!(
            "height={};width={};frames={};channels={};heads={};attention_layers={};ffn_mult={};fold={};gate_reduction={};\
             embed_dim={};omega={};gamma_init={:e};lambda_init={:e};ln_eps={:e};ffas={};ffas_options={};ffas_search={};\
             temporal={};init_seed={}",
            self.height,
            self.width,
            self.frames,
            list(&self.channels),
            self.heads,
            self.attention_layers,
            self.ffn_mult,
            self.fold,
            self.gate_reduction,
            self.embed_dim,
            list(&self.omega),
            self.gamma_init,
            self.lambda_init,
            self.ln_eps,
            self.ffas.enabled,
            opts,
            self.ffas.search,
            self.temporal,
            self.init_seed,
        )
    }

    /// First eight bytes of the SHA-256 of [`ModelConfig::canonical`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}
