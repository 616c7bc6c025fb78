//! The episodic evaluation protocol: sample test episodes, detect on the
//! queries, and average per-episode mAP.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{EvalConfig, Mode};
use crate::data::{Dataset, SplitKind};
use crate::episode::{episode_stream, Episode};
use crate::error::{Error, Result};
use crate::head::{ClassProbMap, MaskMap};
use crate::inference::{decode_detections, soft_nms, DetectionSet};
use crate::metrics::{evaluate_map, MapResult, VideoGroundTruth};
use crate::model::{EpisodeData, ForwardOptions, Model};
use crate::params::BlockSet;

const EVAL_STREAM: u64 = 0xe7a1;

/// Mean of per-episode results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub split: SplitKind,
    pub ways: usize,
    pub shots: usize,
    pub episodes: usize,
    pub tiou_grid: Vec<f64>,
    /// Mean over episodes of the class-mean AP at each threshold.
    pub map: Vec<f64>,
    /// Mean of `map` over the grid.
    pub average: f64,
    pub episode_average: Vec<f64>,
    /// Hash of the configuration the model was trained with, if known.
    pub config_hash: Option<String>,
}

impl EvalReport {
    /// Text table of AP per threshold.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{} {:?} {}-way {}-shot, {} episodes\n",
            self.mode, self.split, self.ways, self.shots, self.episodes
        );
        for (th, ap) in self.tiou_grid.iter().zip(&self.map) {
            s.push_str(&format!("  mAP@{th:.2}  {:6.2}\n", 100.0 * ap));
        }
        s.push_str(&format!("  avg       {:6.2}\n", 100.0 * self.average));
        s
    }
}

/// Detections and ground truth of one evaluated episode, in each video's
/// own snippet units with global class ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub index: usize,
    pub class_ids: Vec<usize>,
    pub predictions: Vec<DetectionSet>,
    pub ground_truth: Vec<VideoGroundTruth>,
    pub result: MapResult,
}

/// Suppressed detections for every query of `episode`.
pub fn predict_episode(
    model: &Model,
    dataset: &Dataset,
    episode: &Episode,
    mode: Mode,
    cfg: &EvalConfig,
) -> Result<Vec<DetectionSet>> {
    let data = EpisodeData::new(episode, &dataset.videos);
    let t = Tape::new(BlockSet::empty());
    let out = model.forward_episode(&t, &data, ForwardOptions::inference(mode))?;
    let l = model.snippets();
    let mut sets = Vec::with_capacity(out.queries.len());
    for (q, video) in out.queries.iter().zip(&data.queries) {
        let p = ClassProbMap::from_snippet_major(&t.value(q.probs), model.config.tau);
        let m = MaskMap {
            masks: t.value(q.masks).clone(),
        };
        if !p.probs.is_finite() || !m.masks.is_finite() {
            return Err(Error::NonFinite(format!("predictions for video {}", video.video_id)));
        }
        let raw = decode_detections(&p, &m, &cfg.thresholds, cfg.top_k);
        let scale = video.length() as f64 / l as f64;
        let segments = soft_nms(&raw, cfg.sigma, cfg.score_floor)?
            .into_iter()
            .map(|mut d| {
                d.start *= scale;
                d.end *= scale;
                d.class_id = data.class_ids[d.class_id];
                d
            })
            .collect();
        sets.push(DetectionSet {
            video_id: video.video_id.clone(),
            segments,
        });
    }
    Ok(sets)
}

fn evaluate_episode(
    model: &Model,
    dataset: &Dataset,
    episode: &Episode,
    index: usize,
    cfg: &EvalConfig,
) -> Result<EpisodeOutcome> {
    let predictions = predict_episode(model, dataset, episode, cfg.mode, cfg)?;
    let ground_truth: Vec<VideoGroundTruth> = episode
        .query
        .iter()
        .map(|&i| {
            let v = &dataset.videos[i];
            VideoGroundTruth {
                video_id: v.video_id.clone(),
                annotations: v
                    .annotations
                    .iter()
                    .filter(|a| episode.class_ids.contains(&a.class_id))
                    .copied()
                    .collect(),
            }
        })
        .collect();
    let result = evaluate_map(&predictions, &ground_truth, &episode.class_ids, &cfg.tiou_grid);
    Ok(EpisodeOutcome {
        index,
        class_ids: episode.class_ids.clone(),
        predictions,
        ground_truth,
        result,
    })
}

/// Episode sizes for `cfg`: zero-shot takes every class of the split and no
/// support.
pub fn episode_shape(dataset: &Dataset, cfg: &EvalConfig) -> (usize, usize) {
    match cfg.mode {
        Mode::Zs => (dataset.split.classes(cfg.split).len(), 0),
        _ => (cfg.ways, cfg.shots),
    }
}

/// Evaluates `cfg.episodes` episodes on `cfg.workers` threads and returns
/// every outcome in episode order.
pub fn run_episodes(model: &Model, dataset: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<Vec<EpisodeOutcome>> {
    cfg.validate()?;
    let (ways, shots) = episode_shape(dataset, cfg);
    let split = dataset.split.classes(cfg.split);
    let stream = episode_stream(
        &dataset.videos,
        &dataset.class_names,
        split,
        ways,
        shots,
        cfg.episodes,
        seed ^ EVAL_STREAM,
    )?;
    let workers = cfg.workers.clamp(1, cfg.episodes);
    let mut slots: Vec<Option<Result<EpisodeOutcome>>> = (0..cfg.episodes).map(|_| None).collect();
    std::thread::scope(|scope| {
        let stream = &stream;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..cfg.episodes)
                        .step_by(workers)
                        .map(|i| {
                            (
                                i,
                                stream
                                    .get(i)
                                    .and_then(|ep| evaluate_episode(model, dataset, &ep, i, cfg)),
                            )
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every episode evaluated")).collect()
}

/// Averages per-episode results into a report.
pub fn summarize(outcomes: &[EpisodeOutcome], dataset: &Dataset, cfg: &EvalConfig) -> EvalReport {
    let (ways, shots) = episode_shape(dataset, cfg);
    let n = outcomes.len().max(1) as f64;
    let map: Vec<f64> = (0..cfg.tiou_grid.len())
        .map(|i| outcomes.iter().map(|o| o.result.map[i]).sum::<f64>() / n)
        .collect();
    let average = if map.is_empty() {
        0.0
    } else {
        map.iter().sum::<f64>() / map.len() as f64
    };
    EvalReport {
        mode: cfg.mode,
        split: cfg.split,
        ways,
        shots,
        episodes: outcomes.len(),
        tiou_grid: cfg.tiou_grid.clone(),
        map,
        average,
        episode_average: outcomes.iter().map(|o| o.result.average).collect(),
        config_hash: None,
    }
}

/// Runs the protocol and returns the averaged report.
pub fn run_protocol(model: &Model, dataset: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    let outcomes = run_episodes(model, dataset, cfg, seed)?;
    Ok(summarize(&outcomes, dataset, cfg))
}
