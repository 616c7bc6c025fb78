//! Browser demo: synthetic videos, Soft-NMS and average precision, exposed
//! to JavaScript as JSON-in/JSON-out functions.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use mmfs_core::data::{generate_synthetic_dataset, SegmentAnnotation, SynthConfig};
use mmfs_core::inference::{soft_nms, Detection, DetectionSet};
use mmfs_core::metrics::{interpolated_ap, precision_recall, VideoGroundTruth};

#[derive(Serialize)]
struct VideoView {
    video_id: String,
    length: usize,
    class_names: Vec<String>,
    annotations: Vec<SegmentAnnotation>,
    /// `similarity[c][t]`: cosine of snippet `t` with the mean foreground
    /// feature of class `c` over every other video.
    similarity: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ClassScore {
    class: usize,
    ap: f64,
    /// `(precision, recall)` in ranked order.
    curve: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct ScoreView {
    tiou: f64,
    map: f64,
    classes: Vec<ClassScore>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Video `index` of the default synthetic dataset generated from `seed`,
/// with per-class similarity tracks.
pub fn video_view(seed: u64, index: usize) -> Result<String, String> {
    let ds = generate_synthetic_dataset(&SynthConfig::default(), seed).map_err(|e| e.to_string())?;
    let video = ds
        .videos
        .get(index)
        .ok_or_else(|| format!("video index {index} out of range 0..{}", ds.videos.len()))?;
    let dim = video.features.cols();
    let feats = video.features.to_matrix();
    let similarity = (0..ds.num_classes())
        .map(|c| {
            let mut proto = vec![0.0; dim];
            for other in ds.videos.iter().filter(|v| v.video_id != video.video_id) {
                let m = other.features.to_matrix();
                for a in other.annotations.iter().filter(|a| a.class_id == c) {
                    for t in (0..other.length()).filter(|&t| a.covers(t)) {
                        for (p, x) in proto.iter_mut().zip(m.row(t)) {
                            *p += x;
                        }
                    }
                }
            }
            (0..video.length()).map(|t| cosine(feats.row(t), &proto)).collect()
        })
        .collect();
    let view = VideoView {
        video_id: video.video_id.clone(),
        length: video.length(),
        class_names: ds.class_names.clone(),
        annotations: video.annotations.clone(),
        similarity,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// Soft-NMS over a JSON array of detections.
pub fn suppress_json(detections: &str, sigma: f64, score_floor: f64) -> Result<String, String> {
    let dets: Vec<Detection> = serde_json::from_str(detections).map_err(|e| e.to_string())?;
    let kept = soft_nms(&dets, sigma, score_floor).map_err(|e| e.to_string())?;
    serde_json::to_string(&kept).map_err(|e| e.to_string())
}

/// AP per class and mAP of a JSON array of detections against a JSON array
/// of ground-truth segments, both on one video.
pub fn score_json(detections: &str, ground_truth: &str, tiou: f64) -> Result<String, String> {
    if !(tiou > 0.0 && tiou <= 1.0) {
        return Err(format!("tIoU threshold must lie in (0, 1], got {tiou}"));
    }
    let segments: Vec<Detection> = serde_json::from_str(detections).map_err(|e| e.to_string())?;
    let annotations: Vec<SegmentAnnotation> = serde_json::from_str(ground_truth).map_err(|e| e.to_string())?;
    let preds = [DetectionSet {
        video_id: "demo".into(),
        segments,
    }];
    preds[0].validate().map_err(|e| e.to_string())?;
    let gt = [VideoGroundTruth {
        video_id: "demo".into(),
        annotations,
    }];
    let mut classes: Vec<usize> = gt[0].annotations.iter().map(|a| a.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let classes: Vec<ClassScore> = classes
        .into_iter()
        .map(|class| {
            let curve = precision_recall(&preds, &gt, class, tiou);
            ClassScore {
                class,
                ap: interpolated_ap(&curve),
                curve,
            }
        })
        .collect();
    let map = if classes.is_empty() {
        0.0
    } else {
        classes.iter().map(|c| c.ap).sum::<f64>() / classes.len() as f64
    };
    serde_json::to_string(&ScoreView { tiou, map, classes }).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn sample_video(seed: u32, index: u32) -> Result<String, JsError> {
    video_view(u64::from(seed), index as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn suppress(detections: &str, sigma: f64, score_floor: f64) -> Result<String, JsError> {
    suppress_json(detections, sigma, score_floor).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn score(detections: &str, ground_truth: &str, tiou: f64) -> Result<String, JsError> {
    score_json(detections, ground_truth, tiou).map_err(|e| JsError::new(&e))
}
