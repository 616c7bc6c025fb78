//! Decoding class probabilities and masks into scored segments, and
//! Gaussian Soft-NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{ClassProbMap, MaskMap};

/// A scored segment `[start, end)` in snippet units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(start: f64, end: f64, class_id: usize, score: f64) -> Self {
        Self {
            start,
            end,
            class_id,
            score,
        }
    }
}

/// Detections of one video, in the prediction interchange layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub video_id: String,
    pub segments: Vec<Detection>,
}

impl DetectionSet {
    pub fn validate(&self) -> Result<()> {
        for d in &self.segments {
            if !(d.start.is_finite() && d.end.is_finite() && d.start < d.end) {
                return Err(Error::Data(format!(
                    "video {}: segment [{}, {}) is not a valid interval",
                    self.video_id, d.start, d.end
                )));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::Data(format!(
                    "video {}: score {} outside [0, 1]",
                    self.video_id, d.score
                )));
            }
        }
        Ok(())
    }
}

/// Temporal IoU of `[a.0, a.1)` and `[b.0, b.1)`.
pub fn segment_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Maximal runs `[start, end)` of entries at or above `theta`.
pub fn runs_above(values: &[f64], theta: f64) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &v) in values.iter().enumerate() {
        match (v >= theta, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, values.len()));
    }
    runs
}

/// Pre-suppression detections: the `top_k` snippets by foreground
/// probability each threshold their mask at every `theta`; each run becomes
/// a segment scored by class probability times mean mask inside the run.
pub fn decode_detections(p: &ClassProbMap, m: &MaskMap, thresholds: &[f64], top_k: usize) -> Vec<Detection> {
    let l = p.snippets().min(m.snippets());
    let mut ranked: Vec<(usize, usize, f64)> = (0..l)
        .map(|t| {
            let (c, prob) = p.best_foreground(t);
            (t, c, prob)
        })
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k);

    let mut out = Vec::new();
    for (t, class, prob) in ranked {
        let col = m.column(t);
        for &theta in thresholds {
            for (s, e) in runs_above(&col, theta) {
                let mean = col[s..e].iter().sum::<f64>() / (e - s) as f64;
                out.push(Detection::new(s as f64, e as f64, class, (prob * mean).clamp(0.0, 1.0)));
            }
        }
    }
    out
}

/// Gaussian Soft-NMS: repeatedly keep the highest-scoring detection and
/// decay the remaining same-class scores by `exp(-iou^2 / sigma)`; anything
/// below `score_floor` is dropped. Output is sorted by descending score.
pub fn soft_nms(dets: &[Detection], sigma: f64, score_floor: f64) -> Result<Vec<Detection>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "soft-nms sigma must be positive, got {sigma}"
        )));
    }
    let mut pool: Vec<Detection> = dets.iter().copied().filter(|d| d.score >= score_floor).collect();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .fold(0, |bi, (i, d)| if d.score > pool[bi].score { i } else { bi });
        let top = pool.swap_remove(best);
        for d in pool.iter_mut().filter(|d| d.class_id == top.class_id) {
            let iou = segment_iou((top.start, top.end), (d.start, d.end));
            d.score *= (-iou * iou / sigma).exp();
        }
        pool.retain(|d| d.score >= score_floor);
        kept.push(top);
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn iou_golden_values() {
        assert!((segment_iou((0.0, 10.0), (5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(segment_iou((2.0, 7.0), (2.0, 7.0)), 1.0);
        assert_eq!(segment_iou((0.0, 1.0), (1.0, 2.0)), 0.0);
        assert_eq!(segment_iou((0.0, 4.0), (1.0, 2.0)), 0.25);
    }

    #[test]
    fn single_run_extraction() {
        assert_eq!(runs_above(&[0.0, 0.0, 1.0, 1.0, 1.0, 0.0], 0.5), vec![(2, 5)]);
        assert_eq!(runs_above(&[0.6, 0.1, 0.7], 0.5), vec![(0, 1), (2, 3)]);
        assert!(runs_above(&[0.1, 0.2], 0.5).is_empty());
    }

    fn maps(prob_fg: f64, col: &[f64]) -> (ClassProbMap, MaskMap) {
        let l = col.len();
        let probs = Matrix::from_fn(2, l, |r, _| if r == 0 { prob_fg } else { 1.0 - prob_fg });
        let masks = Matrix::from_fn(l, l, |i, _| col[i]);
        (ClassProbMap { probs, tau: 1.0 }, MaskMap { masks })
    }

    #[test]
    fn decoded_score_is_prob_times_mean_mask() {
        let (p, m) = maps(0.8, &[0.0, 0.0, 0.9, 0.7, 0.8, 0.0]);
        let d = decode_detections(&p, &m, &[0.5], 1);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].start, d[0].end), (2.0, 5.0));
        assert!((d[0].score - 0.8 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn masks_below_every_threshold_give_nothing() {
        let (p, m) = maps(0.9, &[0.05; 6]);
        assert!(decode_detections(&p, &m, &[0.1, 0.5, 0.9], 20).is_empty());
    }

    #[test]
    fn duplicate_decays_by_gaussian_factor() {
        let a = Detection::new(0.0, 5.0, 0, 0.9);
        let b = Detection::new(0.0, 5.0, 0, 0.8);
        let out = soft_nms(&[a, b], 0.5, 0.001).unwrap();
        assert_eq!(out[0], a);
        assert!((out[1].score - 0.8 * (-2.0f64).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.1083).abs() < 1e-4);
    }

    #[test]
    fn disjoint_or_other_class_is_untouched() {
        let a = Detection::new(0.0, 5.0, 0, 0.9);
        let b = Detection::new(6.0, 9.0, 0, 0.8);
        let c = Detection::new(0.0, 5.0, 1, 0.7);
        assert_eq!(soft_nms(&[c, b, a], 0.5, 0.001).unwrap(), vec![a, b, c]);
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        assert!(soft_nms(&[], 0.0, 0.001).is_err());
    }

    #[test]
    fn interchange_format_uses_class_key() {
        let set = DetectionSet {
            video_id: "v".into(),
            segments: vec![Detection::new(1.0, 2.0, 3, 0.5)],
        };
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.contains("\"class\":3"));
        assert_eq!(serde_json::from_str::<DetectionSet>(&json).unwrap(), set);
        let bad = DetectionSet {
            video_id: "v".into(),
            segments: vec![Detection::new(2.0, 2.0, 0, 0.5)],
        };
        assert!(bad.validate().is_err());
    }
}
