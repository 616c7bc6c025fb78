//! N-way K-shot episode construction.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoRecord;
use crate::error::{Error, Result};

/// One few-shot task. Video references are indices into the pool the
/// episode was sampled from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    /// `support[i]` holds the K shots of `class_ids[i]`.
    pub support: Vec<Vec<usize>>,
    /// `query[i]` is the query video drawn for `class_ids[i]`.
    pub query: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_ids.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    /// Episode-local label of a global class id.
    pub fn local_label(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn manifest(&self, pool: &[VideoRecord]) -> EpisodeManifest {
        EpisodeManifest {
            class_ids: self.class_ids.clone(),
            class_names: self.class_names.clone(),
            support: self
                .support
                .iter()
                .map(|s| s.iter().map(|&i| pool[i].video_id.clone()).collect())
                .collect(),
            query: self.query.iter().map(|&i| pool[i].video_id.clone()).collect(),
        }
    }
}

/// Serializable audit record of an episode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    pub support: Vec<Vec<String>>,
    pub query: Vec<String>,
}

/// Samples `ways` classes from `split` and, for each, `shots` support videos
/// plus one query video. No video appears twice in an episode.
pub fn sample_episode(
    pool: &[VideoRecord],
    class_names: &[String],
    split: &BTreeSet<usize>,
    ways: usize,
    shots: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if ways == 0 {
        return Err(Error::InvalidArgument("episode needs at least one class".into()));
    }
    if split.len() < ways {
        return Err(Error::InsufficientClassPool {
            needed: ways,
            available: split.len(),
        });
    }
    let mut classes: Vec<usize> = split.iter().copied().collect();
    classes.shuffle(rng);
    classes.truncate(ways);

    let mut used = HashSet::new();
    let mut support = Vec::with_capacity(ways);
    let mut query = Vec::with_capacity(ways);
    for &c in &classes {
        let mut candidates: Vec<usize> = (0..pool.len())
            .filter(|i| !used.contains(i) && pool[*i].contains_class(c))
            .collect();
        if candidates.len() < shots + 1 {
            return Err(Error::InsufficientVideos {
                class_id: c,
                needed: shots + 1,
                available: candidates.len(),
            });
        }
        candidates.shuffle(rng);
        candidates.truncate(shots + 1);
        used.extend(candidates.iter().copied());
        let q = candidates.pop().expect("shots + 1 >= 1 candidates");
        support.push(candidates);
        query.push(q);
    }
    let names = classes
        .iter()
        .map(|&c| class_names.get(c).cloned().unwrap_or_else(|| format!("class {c}")))
        .collect();
    Ok(Episode {
        class_ids: classes,
        class_names: names,
        support,
        query,
    })
}

/// Deterministic RNG for episode `index` of the stream seeded by `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Indexable stream of episodes: episode `i` depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct EpisodeStream<'a> {
    pool: &'a [VideoRecord],
    class_names: &'a [String],
    split: &'a BTreeSet<usize>,
    ways: usize,
    shots: usize,
    count: usize,
    seed: u64,
    next: usize,
}

impl<'a> EpisodeStream<'a> {
    pub fn get(&self, index: usize) -> Result<Episode> {
        let mut rng = episode_rng(self.seed, index as u64);
        sample_episode(self.pool, self.class_names, self.split, self.ways, self.shots, &mut rng)
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let ep = self.get(self.next);
        self.next += 1;
        Some(ep)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = self.count - self.next;
        (rest, Some(rest))
    }
}

impl ExactSizeIterator for EpisodeStream<'_> {}

#[allow(clippy::too_many_arguments)]
pub fn episode_stream<'a>(
    pool: &'a [VideoRecord],
    class_names: &'a [String],
    split: &'a BTreeSet<usize>,
    ways: usize,
    shots: usize,
    count: usize,
    seed: u64,
) -> Result<EpisodeStream<'a>> {
    if count == 0 {
        return Err(Error::InvalidArgument("episode count must be at least 1".into()));
    }
    Ok(EpisodeStream {
        pool,
        class_names,
        split,
        ways,
        shots,
        count,
        seed,
        next: 0,
    })
}
