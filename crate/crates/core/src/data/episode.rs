use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{generate_video, ClassSpec, SyntheticVideo, VideoConfig};
use crate::error::{Error, Result};

/// One N-way K-shot task.
///
/// Support videos are stored class-major: `support[k * shot + m]` is the
/// `m`-th example of episode class `k`. Video labels keep the catalog class
/// id; `query_targets` holds episode-local class indices in `0..way`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    /// Catalog class id of each episode class.
    pub classes: Vec<usize>,
    pub support: Vec<SyntheticVideo>,
    pub queries: Vec<SyntheticVideo>,
    pub query_targets: Vec<usize>,
}

impl Episode {
    pub fn support_targets(&self) -> Vec<usize> {
        (0..self.way).flat_map(|k| std::iter::repeat_n(k, self.shot)).collect()
    }

    /// Support then query videos, the order the model consumes them in.
    pub fn videos(&self) -> impl Iterator<Item = &SyntheticVideo> {
        self.support.iter().chain(&self.queries)
    }
}

/// Mixes seed components with the splitmix64 finalizer.
pub fn derive_seed(parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x5105_4e7u64, |h, &p| mix(h ^ mix(p)))
}

fn check_request(available: usize, way: usize, shot: usize) -> Result<()> {
    if way == 0 || shot == 0 {
        return Err(Error::Config(format!("way and shot must be positive (way={way}, shot={shot})")));
    }
    if way > available {
        return Err(Error::Config(format!("{way}-way episode requested from {available} classes")));
    }
    Ok(())
}

/// Query `i` belongs to episode class `i % way`.
fn query_classes(way: usize, num_queries: usize) -> Vec<usize> {
    (0..num_queries).map(|i| i % way).collect()
}

/// Draws `way` catalog classes without replacement and renders `shot`
/// support videos per class plus `num_queries` queries spread round-robin
/// over the classes. Every video gets its own seed derived from
/// `(seed, class, instance)`.
pub fn sample_episode(
    catalog: &[ClassSpec],
    way: usize,
    shot: usize,
    num_queries: usize,
    seed: u64,
    config: &VideoConfig,
) -> Result<Episode> {
    check_request(catalog.len(), way, shot)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x6570]));
    let classes: Vec<usize> = index::sample(&mut rng, catalog.len(), way).into_vec();
    let render = |class: usize, instance: usize| {
        let id = classes[class];
        generate_video(catalog[id], id, derive_seed(&[seed, id as u64, instance as u64]), config)
    };
    let mut support = Vec::with_capacity(way * shot);
    for k in 0..way {
        for m in 0..shot {
            support.push(render(k, m)?);
        }
    }
    let query_targets = query_classes(way, num_queries);
    let queries = query_targets
        .iter()
        .enumerate()
        .map(|(i, &k)| render(k, shot + i / way))
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode { way, shot, classes, support, queries, query_targets })
}

/// Where episodes come from: the live generator or a stored dataset.
#[derive(Clone, Debug)]
pub enum VideoSource {
    Generator { catalog: Vec<ClassSpec>, video: VideoConfig },
    Dataset { by_label: BTreeMap<usize, Vec<SyntheticVideo>> },
}

impl VideoSource {
    pub fn from_videos(videos: Vec<SyntheticVideo>) -> Self {
        let mut by_label: BTreeMap<usize, Vec<SyntheticVideo>> = BTreeMap::new();
        for v in videos {
            by_label.entry(v.label).or_default().push(v);
        }
        VideoSource::Dataset { by_label }
    }

    pub fn sample_episode(&self, way: usize, shot: usize, num_queries: usize, seed: u64) -> Result<Episode> {
        match self {
            VideoSource::Generator { catalog, video } => sample_episode(catalog, way, shot, num_queries, seed, video),
            VideoSource::Dataset { by_label } => {
                let per_class = shot + num_queries.div_ceil(way.max(1));
                let eligible: Vec<usize> = by_label.iter().filter(|(_, v)| v.len() >= per_class).map(|(&l, _)| l).collect();
                check_request(eligible.len(), way, shot)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x6570]));
                let picked = index::sample(&mut rng, eligible.len(), way).into_vec();
                let classes: Vec<usize> = picked.iter().map(|&i| eligible[i]).collect();
                let mut draws = Vec::with_capacity(way);
                for &label in &classes {
                    let pool = &by_label[&label];
                    draws.push(index::sample(&mut rng, pool.len(), per_class).into_vec());
                }
                let mut support = Vec::with_capacity(way * shot);
                for (k, &label) in classes.iter().enumerate() {
                    for m in 0..shot {
                        support.push(by_label[&label][draws[k][m]].clone());
                    }
                }
                let query_targets = query_classes(way, num_queries);
                let queries = query_targets
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| by_label[&classes[k]][draws[k][shot + i / way]].clone())
                    .collect();
                Ok(Episode { way, shot, classes, support, queries, query_targets })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Catalog;

    fn small() -> VideoConfig {
        VideoConfig { frames: 4, height: 16, width: 16, radius: 2, step: 2, noise: 0.05 }
    }

    fn check_invariants(ep: &Episode) {
        assert_eq!(ep.support.len(), ep.way * ep.shot);
        let mut distinct = ep.classes.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), ep.way);
        for (k, chunk) in ep.support.chunks(ep.shot).enumerate() {
            assert!(chunk.iter().all(|v| v.label == ep.classes[k]));
        }
        for (q, &t) in ep.queries.iter().zip(&ep.query_targets) {
            assert!(t < ep.way);
            assert_eq!(q.label, ep.classes[t]);
        }
    }

    #[test]
    fn five_way_one_shot_contract() {
        let cat = Catalog::Default.classes();
        let ep = sample_episode(&cat, 5, 1, 5, 42, &small()).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.queries.len(), 5);
        check_invariants(&ep);
    }

    #[test]
    fn two_way_three_shot_contract() {
        let cat = Catalog::Default.classes();
        let ep = sample_episode(&cat, 2, 3, 4, 7, &small()).unwrap();
        for k in 0..2 {
            assert_eq!(ep.support.iter().filter(|v| v.label == ep.classes[k]).count(), 3);
        }
        check_invariants(&ep);
        let seeds: std::collections::HashSet<u64> = ep.videos().map(|v| v.seed).collect();
        assert_eq!(seeds.len(), ep.support.len() + ep.queries.len());
    }

    #[test]
    fn sampling_is_reproducible() {
        let cat = Catalog::Default.classes();
        let a = sample_episode(&cat, 5, 1, 5, 9, &small()).unwrap();
        let b = sample_episode(&cat, 5, 1, 5, 9, &small()).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&cat, 5, 1, 5, 10, &small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_classes_is_a_config_error() {
        let cat = Catalog::Motion.classes();
        assert!(matches!(sample_episode(&cat, 6, 1, 1, 0, &small()), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_source_honors_episode_contract() {
        let cat = Catalog::Spatial.classes();
        let videos = crate::data::generate_dataset(&cat, 30, 3, &small()).unwrap();
        let src = VideoSource::from_videos(videos);
        let ep = src.sample_episode(3, 2, 6, 11).unwrap();
        check_invariants(&ep);
        assert_eq!(ep, src.sample_episode(3, 2, 6, 11).unwrap());
        assert!(src.sample_episode(7, 1, 1, 0).is_err());
    }
}
