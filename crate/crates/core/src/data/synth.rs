//! Seeded synthetic benchmark with planted action segments.
//!
//! Every class owns a signature direction in feature space. Snippets inside a
//! planted segment receive that direction scaled by `amplitude`, a class
//! motif that rises and falls over the segment, and a shared actionness
//! component; everything else is Gaussian noise. Each video perturbs its
//! class signature by a private direction (`video_variation`), so a few
//! support videos give a biased estimate of the class.
//!
//! Class names are made of words whose embeddings form the lexicon of the
//! text model. A class signature is partly aligned with the embedding of its
//! name (`text_alignment`), which is what lets class names carry information
//! about the visual appearance of an action.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassSplit, Dataset, Lexicon, RawFeatures, SegmentAnnotation, VideoRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub base: f64,
    pub validation: f64,
    pub novel: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            base: 0.8,
            validation: 0.1,
            novel: 0.1,
        }
    }
}

impl SplitRatios {
    /// Class counts `(base, validation, novel)` for `num_classes` classes.
    pub fn counts(&self, num_classes: usize) -> Result<(usize, usize, usize)> {
        let parts = [self.base, self.validation, self.novel];
        if parts.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::Config("split: every ratio must be positive".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("split: ratios must sum to 1".into()));
        }
        let c = num_classes as f64;
        let val = (c * self.validation).round() as usize;
        let novel = (c * self.novel).round() as usize;
        let base = num_classes.saturating_sub(val + novel);
        if base == 0 || val == 0 || novel == 0 || base + val + novel != num_classes {
            return Err(Error::Config(format!(
                "split: ratios {parts:?} leave an empty split for {num_classes} classes"
            )));
        }
        Ok((base, val, novel))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub min_snippets: usize,
    pub max_snippets: usize,
    pub feature_dim: usize,
    pub max_segments_per_video: usize,
    /// Segment length range as a fraction of video length.
    pub min_segment_frac: f64,
    pub max_segment_frac: f64,
    pub amplitude: f64,
    pub actionness: f64,
    pub motif: f64,
    pub noise_std: f64,
    /// Weight of the per-video direction mixed into the class signature.
    pub video_variation: f64,
    /// Cosine between a class signature and its name embedding, in [0, 1].
    pub text_alignment: f64,
    pub split: SplitRatios,
    /// Overrides the built-in class names when non-empty.
    pub class_names: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            videos_per_class: 12,
            min_snippets: 64,
            max_snippets: 160,
            feature_dim: 64,
            max_segments_per_video: 2,
            min_segment_frac: 0.15,
            max_segment_frac: 0.35,
            amplitude: 1.5,
            actionness: 2.0,
            motif: 0.75,
            noise_std: 1.0,
            video_variation: 0.8,
            text_alignment: 0.7,
            split: SplitRatios::default(),
            class_names: Vec::new(),
        }
    }
}

const CLASS_NAMES: [&str; 24] = [
    "cricket shot",
    "long jump",
    "high jump",
    "pole vault",
    "shot put",
    "playing guitar",
    "playing piano",
    "brushing teeth",
    "washing dishes",
    "riding bike",
    "hammer throw",
    "discus throw",
    "rock climbing",
    "ice skating",
    "horse riding",
    "walking dog",
    "mowing lawn",
    "surfing wave",
    "tennis serve",
    "golf swing",
    "bowling ball",
    "diving board",
    "rowing boat",
    "juggling balls",
];

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match CLASS_NAMES.get(i) {
            Some(s) => (*s).to_string(),
            None => format!("action {}", i + 1),
        })
        .collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 6 {
            return fail(format!("num_classes: need at least 6, got {}", self.num_classes));
        }
        if self.videos_per_class < 3 {
            return fail("videos_per_class: need at least 3".into());
        }
        if self.min_snippets < 8 || self.min_snippets > self.max_snippets {
            return fail("min_snippets/max_snippets: need 8 <= min <= max".into());
        }
        if self.feature_dim == 0 {
            return fail("feature_dim: must be positive".into());
        }
        if self.max_segments_per_video == 0 {
            return fail("max_segments_per_video: must be at least 1".into());
        }
        if !(0.0 < self.min_segment_frac
            && self.min_segment_frac <= self.max_segment_frac
            && self.max_segment_frac <= 0.9)
        {
            return fail("min_segment_frac/max_segment_frac: need 0 < min <= max <= 0.9".into());
        }
        if !(0.0..=1.0).contains(&self.text_alignment) {
            return fail("text_alignment: must lie in [0, 1]".into());
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("actionness", self.actionness),
            ("motif", self.motif),
            ("noise_std", self.noise_std),
            ("video_variation", self.video_variation),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name}: must be finite and non-negative"));
            }
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return fail("class_names: length must equal num_classes".into());
        }
        self.split.counts(self.num_classes)?;
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            default_class_names(self.num_classes)
        } else {
            self.class_names.clone()
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    normalized(v)
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

pub(crate) fn words_of(name: &str) -> Vec<String> {
    name.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Generates a dataset and its class split. The same config and seed give
/// identical output.
pub fn generate_synthetic_dataset(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = config.feature_dim;
    let names = config.names();

    let vocabulary: BTreeSet<String> = names.iter().flat_map(|n| words_of(n)).collect();
    let words: BTreeMap<String, Vec<f64>> = vocabulary
        .into_iter()
        .map(|w| {
            let v = unit_vector(&mut rng, dim);
            (w, v)
        })
        .collect();

    let alpha = config.text_alignment;
    let beta = (1.0 - alpha * alpha).max(0.0).sqrt();
    let actionness_dir = unit_vector(&mut rng, dim);
    let mut signatures = Vec::with_capacity(config.num_classes);
    let mut motifs = Vec::with_capacity(config.num_classes);
    for name in &names {
        let mut semantic = vec![0.0; dim];
        for w in words_of(name) {
            for (s, x) in semantic.iter_mut().zip(&words[&w]) {
                *s += x;
            }
        }
        let semantic = normalized(semantic);
        let own = unit_vector(&mut rng, dim);
        let sig: Vec<f64> = semantic.iter().zip(&own).map(|(s, o)| alpha * s + beta * o).collect();
        signatures.push(normalized(sig));
        motifs.push(unit_vector(&mut rng, dim));
    }

    let (n_base, n_val, _) = config.split.counts(config.num_classes)?;
    let mut order: Vec<usize> = (0..config.num_classes).collect();
    order.shuffle(&mut rng);
    let split = ClassSplit {
        base: order[..n_base].iter().copied().collect(),
        validation: order[n_base..n_base + n_val].iter().copied().collect(),
        novel: order[n_base + n_val..].iter().copied().collect(),
    };

    let mut videos = Vec::with_capacity(config.num_classes * config.videos_per_class);
    for class_id in 0..config.num_classes {
        for i in 0..config.videos_per_class {
            let t = rng.random_range(config.min_snippets..=config.max_snippets);
            let segments = plant_segments(&mut rng, config, t, class_id);
            let signature = if config.video_variation > 0.0 {
                let own = unit_vector(&mut rng, dim);
                normalized(
                    signatures[class_id]
                        .iter()
                        .zip(&own)
                        .map(|(s, o)| s + config.video_variation * o)
                        .collect(),
                )
            } else {
                signatures[class_id].clone()
            };
            let mut data = Vec::with_capacity(t * dim);
            for j in 0..t {
                let active = segments.iter().find(|s| s.covers(j));
                for k in 0..dim {
                    let z: f64 = rng.sample(StandardNormal);
                    let mut v = config.noise_std * z;
                    if let Some(seg) = active {
                        let progress = (j as f64 + 0.5 - seg.start) / seg.duration();
                        v += config.amplitude * signature[k]
                            + config.actionness * actionness_dir[k]
                            + config.motif * (std::f64::consts::PI * progress).sin() * motifs[class_id][k];
                    }
                    data.push(v as f32);
                }
            }
            videos.push(VideoRecord {
                video_id: format!("v{class_id:03}_{i:03}"),
                features: RawFeatures::new(t, dim, data)?,
                annotations: segments,
            });
        }
    }

    let dataset = Dataset {
        class_names: names,
        videos,
        split,
        lexicon: Some(Lexicon { dim, words }),
    };
    dataset.validate()?;
    Ok(dataset)
}

fn plant_segments(rng: &mut ChaCha8Rng, config: &SynthConfig, t: usize, class_id: usize) -> Vec<SegmentAnnotation> {
    let wanted = rng.random_range(1..=config.max_segments_per_video);
    let min_len = ((config.min_segment_frac * t as f64).round() as usize).max(2);
    let max_len = ((config.max_segment_frac * t as f64).round() as usize).clamp(min_len, t);
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..50 {
            let len = rng.random_range(min_len..=max_len);
            let start = rng.random_range(0..=t - len);
            let end = start + len;
            // Keep at least one background snippet between instances.
            let clear = placed.iter().all(|&(s, e)| end < s || start > e);
            if clear {
                placed.push((start, end));
                break;
            }
        }
    }
    placed.sort_unstable();
    placed
        .into_iter()
        .map(|(s, e)| SegmentAnnotation::new(s as f64, e as f64, class_id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gt_to_mask;

    fn small() -> SynthConfig {
        SynthConfig {
            videos_per_class: 4,
            min_snippets: 30,
            max_snippets: 50,
            feature_dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_split_is_eight_one_one() {
        let ds = generate_synthetic_dataset(&small(), 1).unwrap();
        assert_eq!(ds.split.base.len(), 8);
        assert_eq!(ds.split.validation.len(), 1);
        assert_eq!(ds.split.novel.len(), 1);
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic_dataset(&small(), 9).unwrap();
        let b = generate_synthetic_dataset(&small(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_video_has_a_planted_segment_of_its_class() {
        let ds = generate_synthetic_dataset(&small(), 2).unwrap();
        for v in &ds.videos {
            assert!(!v.annotations.is_empty());
            let class: usize = v.video_id[1..4].parse().unwrap();
            assert!(v.annotations.iter().all(|a| a.class_id == class));
        }
    }

    #[test]
    fn planted_extent_matches_annotation() {
        // With no noise the signal is non-zero exactly inside annotations.
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small()
        };
        let ds = generate_synthetic_dataset(&cfg, 3).unwrap();
        for v in &ds.videos {
            let class = v.annotations[0].class_id;
            let mask = gt_to_mask(&v.annotations, class, v.length());
            for (t, inside) in mask.iter().enumerate() {
                let row = &v.features.data()[t * 8..(t + 1) * 8];
                let energy: f32 = row.iter().map(|x| x.abs()).sum();
                assert_eq!(energy > 0.0, *inside, "video {} snippet {t}", v.video_id);
            }
        }
    }

    #[test]
    fn rejects_configs_with_empty_split() {
        let cfg = SynthConfig {
            split: SplitRatios {
                base: 0.96,
                validation: 0.02,
                novel: 0.02,
            },
            ..small()
        };
        assert!(matches!(generate_synthetic_dataset(&cfg, 0), Err(Error::Config(_))));
        let cfg = SynthConfig {
            num_classes: 4,
            ..small()
        };
        assert!(generate_synthetic_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn splits_are_disjoint_across_seeds() {
        let cfg = SynthConfig {
            videos_per_class: 3,
            min_snippets: 8,
            max_snippets: 12,
            feature_dim: 2,
            ..SynthConfig::default()
        };
        for seed in 0..100 {
            let ds = generate_synthetic_dataset(&cfg, seed).unwrap();
            ds.split.validate(cfg.num_classes).unwrap();
        }
    }

    #[test]
    fn lexicon_covers_every_name_word() {
        let ds = generate_synthetic_dataset(&small(), 4).unwrap();
        let lex = ds.lexicon.unwrap();
        for name in &ds.class_names {
            for w in words_of(name) {
                assert_eq!(lex.words[&w].len(), 8);
            }
        }
    }
}
