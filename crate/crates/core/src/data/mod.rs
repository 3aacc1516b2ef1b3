//! Procedurally generated videos of a moving blob over a textured background.
//!
//! Classes are combinations of blob shape, trajectory and background
//! appearance. Opposite directions are built by exact time reversal, so a
//! left-moving video holds exactly the frames of a right-moving one in
//! reverse order and the two classes can only be told apart by frame order.

mod episode;
mod format;

pub use episode::{derive_seed, sample_episode, Episode, VideoSource};
pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::Tensor;

pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Cross,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Trajectory {
    Left,
    Right,
    Up,
    Down,
    Static,
}

/// One action class of the synthetic catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClassSpec {
    pub shape: Shape,
    pub trajectory: Trajectory,
    /// Background texture id, `0..4`.
    pub appearance: u8,
}

impl fmt::Display for ClassSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}-{:?}-a{}", self.shape, self.trajectory, self.appearance)
    }
}

/// Named class catalogs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Catalog {
    /// Every shape with every trajectory on the plain background (15 classes).
    Default,
    /// A single shape and background; classes differ only in trajectory.
    Motion,
    /// Static blobs; classes differ only in shape and background.
    Spatial,
}

const ALL_SHAPES: [Shape; 3] = [Shape::Square, Shape::Cross, Shape::Disc];
const ALL_TRAJECTORIES: [Trajectory; 5] =
    [Trajectory::Left, Trajectory::Right, Trajectory::Up, Trajectory::Down, Trajectory::Static];

impl Catalog {
    pub fn classes(self) -> Vec<ClassSpec> {
        match self {
            Catalog::Default => ALL_SHAPES
                .iter()
                .flat_map(|&shape| ALL_TRAJECTORIES.iter().map(move |&trajectory| ClassSpec { shape, trajectory, appearance: 0 }))
                .collect(),
            Catalog::Motion => ALL_TRAJECTORIES
                .iter()
                .map(|&trajectory| ClassSpec { shape: Shape::Square, trajectory, appearance: 0 })
                .collect(),
            Catalog::Spatial => [0u8, 1]
                .iter()
                .flat_map(|&appearance| {
                    ALL_SHAPES.iter().map(move |&shape| ClassSpec { shape, trajectory: Trajectory::Static, appearance })
                })
                .collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Catalog::Default => "default",
            Catalog::Motion => "motion",
            Catalog::Spatial => "spatial",
        }
    }
}

impl FromStr for Catalog {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Catalog::Default),
            "motion" => Ok(Catalog::Motion),
            "spatial" => Ok(Catalog::Spatial),
            other => Err(Error::Config(format!("unknown catalog `{other}` (expected default, motion or spatial)"))),
        }
    }
}

/// Geometry and noise of generated videos.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VideoConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    /// Pixels moved per frame.
    pub step: usize,
    /// Amplitude of additive uniform noise.
    pub noise: f64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig { frames: 8, height: 32, width: 32, radius: 4, step: 2, noise: 0.05 }
    }
}

impl VideoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frames > u8::MAX as usize {
            return Err(Error::Config(format!("frame count {} outside 1..=255", self.frames)));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!("frames must be at least 16x16, got {}x{}", self.height, self.width)));
        }
        if self.radius == 0 {
            return Err(Error::Config("blob radius must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise amplitude {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    fn travel(&self) -> usize {
        self.step * (self.frames - 1)
    }
}

/// A labeled clip of `frames` RGB frames, shape `(T, 3, H, W)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Tensor,
    pub label: usize,
    pub seed: u64,
}

impl SyntheticVideo {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }
}

fn background(appearance: u8, c: usize, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let base = [0.25, 0.30, 0.35][c];
    match appearance % 4 {
        0 => base + 0.1 * y as f64 / h as f64,
        1 => base + if (y / 3).is_multiple_of(2) { 0.15 } else { 0.0 },
        2 => base + if ((y / 4) + (x / 4)).is_multiple_of(2) { 0.15 } else { 0.0 },
        _ => base + 0.2 * (x + y) as f64 / (h + w) as f64,
    }
}

fn covers(shape: Shape, dy: isize, dx: isize, r: isize) -> bool {
    match shape {
        Shape::Square => dy.abs() < r && dx.abs() < r,
        Shape::Disc => dy * dy + dx * dx <= r * r,
        Shape::Cross => (dy.abs() <= 1 && dx.abs() <= r) || (dx.abs() <= 1 && dy.abs() <= r),
    }
}

const BLOB_COLOR: [f64; 3] = [0.9, 0.75, 0.3];

/// Renders one video. Deterministic in `(spec, seed, config)`.
pub fn generate_video(spec: ClassSpec, label: usize, seed: u64, config: &VideoConfig) -> Result<SyntheticVideo> {
    config.validate()?;
    let (t_len, h, w, r) = (config.frames, config.height, config.width, config.radius);
    let travel = config.travel();
    let moving_x = matches!(spec.trajectory, Trajectory::Left | Trajectory::Right);
    let moving_y = matches!(spec.trajectory, Trajectory::Up | Trajectory::Down);
    let span_x = if moving_x { travel } else { 0 };
    let span_y = if moving_y { travel } else { 0 };
    if 2 * r + 1 + span_x > w || 2 * r + 1 + span_y > h {
        return Err(Error::Generation(format!(
            "trajectory {:?} of {} frames at step {} exits a {}x{} frame",
            spec.trajectory, t_len, config.step, h, w
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.random_range(r..=h - 1 - r - span_y);
    let x0 = rng.random_range(r..=w - 1 - r - span_x);
    let brightness = rng.random_range(0.85..=1.0);

    // Canonical direction (right / down / static), reversed afterwards.
    let plane = h * w;
    let mut data = vec![0.0; t_len * CHANNELS * plane];
    for t in 0..t_len {
        let cy = (y0 + if moving_y { config.step * t } else { 0 }) as isize;
        let cx = (x0 + if moving_x { config.step * t } else { 0 }) as isize;
        for c in 0..CHANNELS {
            let frame = &mut data[(t * CHANNELS + c) * plane..(t * CHANNELS + c + 1) * plane];
            for y in 0..h {
                for x in 0..w {
                    let inside = covers(spec.shape, y as isize - cy, x as isize - cx, r as isize);
                    let v = if inside { BLOB_COLOR[c] * brightness } else { background(spec.appearance, c, y, x, h, w) };
                    let noise = if config.noise > 0.0 { rng.random_range(-config.noise..=config.noise) } else { 0.0 };
                    frame[y * w + x] = (v + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    if matches!(spec.trajectory, Trajectory::Left | Trajectory::Up) {
        let frame_len = CHANNELS * plane;
        let reversed: Vec<f64> = data.chunks(frame_len).rev().flatten().copied().collect();
        data = reversed;
    }
    Ok(SyntheticVideo { frames: Tensor::new([t_len, CHANNELS, h, w], data)?, label, seed })
}

/// `count` videos cycling through the catalog classes in order.
pub fn generate_dataset(catalog: &[ClassSpec], count: usize, seed: u64, config: &VideoConfig) -> Result<Vec<SyntheticVideo>> {
    if catalog.is_empty() && count > 0 {
        return Err(Error::Config("empty class catalog".into()));
    }
    (0..count)
        .map(|i| {
            let label = i % catalog.len();
            let instance = (i / catalog.len()) as u64;
            generate_video(catalog[label], label, derive_seed(&[seed, label as u64, instance]), config)
        })
        .collect()
}
