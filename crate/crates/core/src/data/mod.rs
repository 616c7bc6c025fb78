//! Videos, annotations, class splits and timeline normalization.

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use io::{load_dataset, read_feature_file, save_dataset, write_feature_file, DatasetManifest};
pub(crate) use synth::words_of;
pub use synth::{default_class_names, generate_synthetic_dataset, SplitRatios, SynthConfig};

/// One labelled action instance. Times are snippet indices of the timeline
/// the annotation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
}

impl SegmentAnnotation {
    pub fn new(start: f64, end: f64, class_id: usize) -> Self {
        Self { start, end, class_id }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn validate(&self, length: f64, num_classes: usize) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) {
            return Err(Error::NonFinite("segment boundary".into()));
        }
        if !(0.0 <= self.start && self.start < self.end && self.end <= length) {
            return Err(Error::Data(format!(
                "segment ({}, {}) invalid on a timeline of length {length}",
                self.start, self.end
            )));
        }
        if self.class_id >= num_classes {
            return Err(Error::Data(format!(
                "segment class {} outside the {num_classes} declared classes",
                self.class_id
            )));
        }
        Ok(())
    }

    /// Whether snippet `t` (centre `t + 0.5`) lies inside the segment.
    pub fn covers(&self, t: usize) -> bool {
        let c = t as f64 + 0.5;
        self.start <= c && c < self.end
    }
}

/// Raw per-snippet features as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl RawFeatures {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} feature matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub features: RawFeatures,
    /// In units of the video's own snippets, `0..features.rows()`.
    pub annotations: Vec<SegmentAnnotation>,
}

impl VideoRecord {
    pub fn length(&self) -> usize {
        self.features.rows()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.length() == 0 {
            return Err(Error::Data(format!("video {} has no snippets", self.video_id)));
        }
        if self.features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of video {}", self.video_id)));
        }
        for a in &self.annotations {
            a.validate(self.length() as f64, num_classes)?;
        }
        Ok(())
    }

    pub fn contains_class(&self, class_id: usize) -> bool {
        self.annotations.iter().any(|a| a.class_id == class_id)
    }

    /// Annotations mapped onto a timeline of `snippets` snippets, with
    /// boundaries snapped to integers and never collapsed to zero length.
    pub fn annotations_on(&self, snippets: usize) -> Vec<SegmentAnnotation> {
        let scale = snippets as f64 / self.length() as f64;
        let l = snippets as f64;
        self.annotations
            .iter()
            .map(|a| {
                let mut s = (a.start * scale).round().clamp(0.0, l - 1.0);
                let mut e = (a.end * scale).round().clamp(0.0, l);
                if e <= s {
                    e = (s + 1.0).min(l);
                    s = e - 1.0;
                }
                SegmentAnnotation::new(s, e, a.class_id)
            })
            .collect()
    }
}

/// Disjoint class sets for base training, validation and novel-class testing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: BTreeSet<usize>,
    pub validation: BTreeSet<usize>,
    pub novel: BTreeSet<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Base,
    Validation,
    Novel,
}

impl ClassSplit {
    pub fn classes(&self, kind: SplitKind) -> &BTreeSet<usize> {
        match kind {
            SplitKind::Base => &self.base,
            SplitKind::Validation => &self.validation,
            SplitKind::Novel => &self.novel,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let sets = [&self.base, &self.validation, &self.novel];
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                if let Some(c) = a.intersection(b).next() {
                    return Err(Error::Data(format!("class {c} appears in two splits")));
                }
            }
        }
        let union: BTreeSet<usize> = sets.iter().flat_map(|s| s.iter().copied()).collect();
        if union != (0..num_classes).collect() {
            return Err(Error::Data(format!(
                "splits do not cover exactly the {num_classes} declared classes"
            )));
        }
        Ok(())
    }
}

/// Token embeddings of a text model's vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub dim: usize,
    pub words: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub videos: Vec<VideoRecord>,
    pub split: ClassSplit,
    pub lexicon: Option<Lexicon>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate(self.num_classes())?;
        let mut ids = BTreeSet::new();
        for v in &self.videos {
            if !ids.insert(v.video_id.as_str()) {
                return Err(Error::Data(format!("duplicate video id {}", v.video_id)));
            }
            v.validate(self.num_classes())?;
        }
        Ok(())
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == id)
    }
}

/// A video's features resampled to a fixed number of snippets.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub data: Matrix,
}

impl FeatureSequence {
    pub fn snippets(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

/// Source position sampled for output snippet `i` of `l` from `t` inputs.
fn sample_position(i: usize, t: usize, l: usize) -> f64 {
    if l == 1 {
        (t - 1) as f64 / 2.0
    } else {
        i as f64 * (t - 1) as f64 / (l - 1) as f64
    }
}

/// `l x t` matrix whose product with a `t x d` sequence performs linear
/// interpolation at `l` equidistant points, endpoints included.
pub fn interpolation_matrix(t: usize, l: usize) -> Matrix {
    let mut m = Matrix::zeros(l, t);
    for i in 0..l {
        let p = sample_position(i, t, l);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let w = p - lo as f64;
        m.set(i, lo, m.get(i, lo) + 1.0 - w);
        if w > 0.0 {
            m.set(i, hi, m.get(i, hi) + w);
        }
    }
    m
}

/// Resamples a `t x d` sequence to exactly `snippets` rows by linear
/// interpolation.
pub fn rescale_features(raw: &Matrix, snippets: usize) -> Result<FeatureSequence> {
    let t = raw.rows();
    if t == 0 {
        return Err(Error::InvalidArgument("cannot rescale an empty sequence".into()));
    }
    if snippets == 0 {
        return Err(Error::InvalidArgument("target snippet count must be positive".into()));
    }
    if !raw.is_finite() {
        return Err(Error::NonFinite("features to rescale".into()));
    }
    let d = raw.cols();
    let mut out = Matrix::zeros(snippets, d);
    for i in 0..snippets {
        let p = sample_position(i, t, snippets);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let w = p - lo as f64;
        for j in 0..d {
            let v = if w == 0.0 {
                raw.get(lo, j)
            } else {
                (1.0 - w) * raw.get(lo, j) + w * raw.get(hi, j)
            };
            out.set(i, j, v);
        }
    }
    Ok(FeatureSequence { data: out })
}

/// Per-snippet membership in the union of `class_id` segments.
pub fn gt_to_mask(annotations: &[SegmentAnnotation], class_id: usize, snippets: usize) -> Vec<bool> {
    (0..snippets)
        .map(|t| annotations.iter().any(|a| a.class_id == class_id && a.covers(t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rescale_identity_when_lengths_match() {
        let raw = Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(rescale_features(&raw, 5).unwrap().data, raw);
    }

    #[test]
    fn rescale_linear_midpoint() {
        let raw = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let out = rescale_features(&raw, 3).unwrap().data;
        assert_eq!(out.row(1), &[0.5, 0.5]);
        assert_eq!(out.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn rescale_long_video_to_fixed_length() {
        let raw = Matrix::from_fn(600, 4, |i, _| i as f64);
        let out = rescale_features(&raw, 100).unwrap();
        assert_eq!(out.snippets(), 100);
        assert_eq!(out.data.get(99, 0), 599.0);
    }

    #[test]
    fn rescale_rejects_non_finite() {
        let raw = Matrix::from_rows(&[vec![0.0], vec![f64::NAN]]);
        assert!(matches!(rescale_features(&raw, 4), Err(Error::NonFinite(_))));
    }

    #[test]
    fn interpolation_matrix_matches_rescale() {
        let raw = Matrix::from_fn(17, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 - 4.0);
        for l in [1, 5, 17, 40] {
            let via_matrix = interpolation_matrix(17, l).matmul(&raw);
            let direct = rescale_features(&raw, l).unwrap().data;
            assert!(via_matrix.max_abs_diff(&direct) < 1e-12);
        }
    }

    #[test]
    fn mask_of_single_segment() {
        let ann = [SegmentAnnotation::new(2.0, 5.0, 0)];
        let m: Vec<u8> = gt_to_mask(&ann, 0, 8).into_iter().map(u8::from).collect();
        assert_eq!(m, vec![0, 0, 1, 1, 1, 0, 0, 0]);
        assert!(gt_to_mask(&[], 0, 8).iter().all(|b| !b));
    }

    #[test]
    fn overlapping_segments_form_a_union() {
        let ann = [
            SegmentAnnotation::new(1.0, 4.0, 2),
            SegmentAnnotation::new(3.0, 7.0, 2),
            SegmentAnnotation::new(8.0, 9.0, 1),
        ];
        let mask = gt_to_mask(&ann, 2, 10);
        // Brute-force membership: snippet t is covered if any class-2
        // interval [s, e) contains it.
        let expected: Vec<bool> = (0..10).map(|t| (1..4).contains(&t) || (3..7).contains(&t)).collect();
        assert_eq!(mask, expected);
    }

    #[test]
    fn snapped_annotations_stay_valid() {
        let video = VideoRecord {
            video_id: "v".into(),
            features: RawFeatures::new(300, 1, vec![0.0; 300]).unwrap(),
            annotations: vec![
                SegmentAnnotation::new(0.0, 1.0, 0),
                SegmentAnnotation::new(299.0, 300.0, 0),
                SegmentAnnotation::new(60.0, 120.0, 0),
            ],
        };
        let mapped = video.annotations_on(100);
        for a in &mapped {
            a.validate(100.0, 1).unwrap();
        }
        assert_eq!((mapped[2].start, mapped[2].end), (20.0, 40.0));
    }

    #[test]
    fn split_validation_detects_overlap() {
        let split = ClassSplit {
            base: [0, 1].into(),
            validation: [1].into(),
            novel: [2].into(),
        };
        assert!(split.validate(3).is_err());
    }

    proptest! {
        #[test]
        fn rescale_preserves_constant_sequences(t in 1usize..60, l in 1usize..120, c in -5.0f64..5.0) {
            let raw = Matrix::filled(t, 2, c);
            let out = rescale_features(&raw, l).unwrap().data;
            prop_assert_eq!(out.rows(), l);
            for v in out.data() {
                prop_assert!((v - c).abs() <= 1e-12 * (1.0 + c.abs()));
            }
        }

        #[test]
        fn mask_sum_equals_union_coverage(
            segs in proptest::collection::vec((0usize..30, 1usize..10, 0usize..3), 0..6)
        ) {
            let l = 40;
            let ann: Vec<SegmentAnnotation> = segs
                .iter()
                .map(|&(s, len, c)| SegmentAnnotation::new(s as f64, (s + len).min(l) as f64, c))
                .collect();
            for class in 0..3 {
                let mask = gt_to_mask(&ann, class, l);
                let mut covered = BTreeSet::new();
                for a in ann.iter().filter(|a| a.class_id == class) {
                    covered.extend(a.start as usize..a.end as usize);
                }
                prop_assert_eq!(mask.iter().filter(|b| **b).count(), covered.len());
            }
        }
    }
}
