//! Mean average precision at temporal IoU thresholds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SegmentAnnotation;
use crate::inference::{segment_iou, DetectionSet};

/// Ground truth of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoGroundTruth {
    pub video_id: String,
    pub annotations: Vec<SegmentAnnotation>,
}

/// Per-class and mean AP over a tIoU grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub tiou_grid: Vec<f64>,
    /// `per_class[c][i]` is the AP of class `c` at `tiou_grid[i]`.
    pub per_class: BTreeMap<usize, Vec<f64>>,
    /// Class-mean AP at each threshold.
    pub map: Vec<f64>,
    /// Mean of `map` over the grid.
    pub average: f64,
    /// Requested classes without ground truth, left out of the mean.
    pub skipped: Vec<usize>,
}

struct Pred<'a> {
    video: &'a str,
    start: f64,
    end: f64,
    score: f64,
}

/// Precision/recall points of one class in ranked order: highest score
/// first, ties broken by video id then segment. Each prediction is matched
/// to the highest-IoU unmatched ground truth of its video at or above
/// `tiou`.
pub fn precision_recall(
    preds: &[DetectionSet],
    gt: &[VideoGroundTruth],
    class_id: usize,
    tiou: f64,
) -> Vec<(f64, f64)> {
    let mut ranked: Vec<Pred<'_>> = preds
        .iter()
        .flat_map(|set| {
            set.segments
                .iter()
                .filter(|d| d.class_id == class_id)
                .map(move |d| Pred {
                    video: &set.video_id,
                    start: d.start,
                    end: d.end,
                    score: d.score,
                })
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video.cmp(b.video))
            .then(a.start.total_cmp(&b.start))
            .then(a.end.total_cmp(&b.end))
    });

    let mut gts: BTreeMap<&str, Vec<(f64, f64, bool)>> = BTreeMap::new();
    let mut total = 0usize;
    for v in gt {
        for a in v.annotations.iter().filter(|a| a.class_id == class_id) {
            gts.entry(v.video_id.as_str())
                .or_default()
                .push((a.start, a.end, false));
            total += 1;
        }
    }
    if total == 0 {
        return Vec::new();
    }

    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (i, p) in ranked.iter().enumerate() {
        if let Some(cands) = gts.get_mut(p.video) {
            let best = cands
                .iter()
                .enumerate()
                .filter(|(_, g)| !g.2)
                .map(|(j, g)| (j, segment_iou((p.start, p.end), (g.0, g.1))))
                .filter(|&(_, iou)| iou >= tiou)
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            if let Some((j, _)) = best {
                cands[j].2 = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / (i + 1) as f64, tp as f64 / total as f64));
    }
    points
}

/// Interpolated AP: the area under the precision envelope
/// `p(r) = max_{r' >= r} precision(r')`.
pub fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].0);
        envelope[i] = best;
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (i, &(_, r)) in points.iter().enumerate() {
        ap += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    ap
}

/// AP of `class_id` at one threshold; `None` when the class has no ground truth.
pub fn average_precision(preds: &[DetectionSet], gt: &[VideoGroundTruth], class_id: usize, tiou: f64) -> Option<f64> {
    let has_gt = gt.iter().any(|v| v.annotations.iter().any(|a| a.class_id == class_id));
    has_gt.then(|| interpolated_ap(&precision_recall(preds, gt, class_id, tiou)))
}

/// mAP of `classes` at every threshold of `tiou_grid`.
pub fn evaluate_map(
    preds: &[DetectionSet],
    gt: &[VideoGroundTruth],
    classes: &[usize],
    tiou_grid: &[f64],
) -> MapResult {
    let mut per_class = BTreeMap::new();
    let mut skipped = Vec::new();
    for &c in classes {
        let aps: Option<Vec<f64>> = tiou_grid
            .iter()
            .map(|&th| average_precision(preds, gt, c, th))
            .collect();
        match aps {
            Some(aps) => {
                per_class.insert(c, aps);
            }
            None => {
                log::warn!("class {c} has no ground truth; left out of mAP");
                skipped.push(c);
            }
        }
    }
    let map: Vec<f64> = (0..tiou_grid.len())
        .map(|i| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.values().map(|a| a[i]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let average = if map.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    MapResult {
        tiou_grid: tiou_grid.to_vec(),
        per_class,
        map,
        average,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Detection;

    fn gt(anns: &[(f64, f64, usize)]) -> Vec<VideoGroundTruth> {
        vec![VideoGroundTruth {
            video_id: "v".into(),
            annotations: anns.iter().map(|&(s, e, c)| SegmentAnnotation::new(s, e, c)).collect(),
        }]
    }

    fn preds(dets: &[(f64, f64, usize, f64)]) -> Vec<DetectionSet> {
        vec![DetectionSet {
            video_id: "v".into(),
            segments: dets.iter().map(|&(s, e, c, p)| Detection::new(s, e, c, p)).collect(),
        }]
    }

    #[test]
    fn one_match_at_iou_point_six() {
        let g = gt(&[(0.0, 10.0, 0)]);
        let p = preds(&[(0.0, 6.0, 0, 0.9)]);
        let r = evaluate_map(&p, &g, &[0], &[0.5, 0.75]);
        assert_eq!(r.map, vec![1.0, 0.0]);
        assert_eq!(r.average, 0.5);
    }

    #[test]
    fn each_ground_truth_is_matched_once() {
        let g = gt(&[(0.0, 10.0, 0)]);
        let p = preds(&[(0.0, 10.0, 0, 0.9), (0.0, 10.0, 0, 0.8)]);
        let pr = precision_recall(&p, &g, 0, 0.5);
        assert_eq!(pr, vec![(1.0, 1.0), (0.5, 1.0)]);
        assert_eq!(average_precision(&p, &g, 0, 0.5), Some(1.0));
    }

    #[test]
    fn handcrafted_three_ground_truths_five_predictions() {
        let g = gt(&[(0.0, 10.0, 0), (20.0, 30.0, 0), (40.0, 50.0, 0)]);
        let p = preds(&[
            (0.0, 10.0, 0, 0.9),
            (60.0, 70.0, 0, 0.8),
            (21.0, 30.0, 0, 0.7),
            (0.0, 9.0, 0, 0.6),
            (40.0, 48.0, 0, 0.5),
        ]);
        // Ranked hits: T F T F T -> precision 1, 1/2, 2/3, 1/2, 3/5.
        let expected = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        assert!((average_precision(&p, &g, 0, 0.5).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn classes_without_ground_truth_are_skipped() {
        let g = gt(&[(0.0, 10.0, 0)]);
        let p = preds(&[(0.0, 10.0, 0, 0.9), (0.0, 10.0, 1, 0.9)]);
        let r = evaluate_map(&p, &g, &[0, 1], &[0.5]);
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.map, vec![1.0]);
    }

    #[test]
    fn no_predictions_give_zero() {
        let g = gt(&[(0.0, 10.0, 0)]);
        assert_eq!(average_precision(&[], &g, 0, 0.5), Some(0.0));
    }
}
