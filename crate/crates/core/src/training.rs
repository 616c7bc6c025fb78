//! Two-stage training: supervised base training on base-class episodes,
//! then meta-training on support-only objectives.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{Mode, ModelConfig, TrainConfig};
use crate::data::Dataset;
use crate::encoders::backbone_trainable;
use crate::episode::{episode_rng, episode_stream};
use crate::error::{Error, Result};
use crate::losses::{
    binary_cross_entropy, loss_background, loss_classification, loss_mask, loss_token_contrastive, mask_targets,
    LossReport, Stage,
};
use crate::model::{EpisodeData, ForwardOptions, Model};
use crate::params::{Adam, Block, BlockSet};
use crate::tensor::Matrix;

const BASE_STREAM: u64 = 0xba5e;
const META_STREAM: u64 = 0x3e7a;
const DROPOUT_STREAM: u64 = 0xd0;

/// Blocks updated in `stage`. The text encoder is never among them.
pub fn trainable_blocks(stage: Stage, model: &ModelConfig, train: &TrainConfig) -> BlockSet {
    let encoder = backbone_trainable(model.encoder_mode);
    let set = match stage {
        Stage::Base => {
            let mut s = BlockSet::all().without(Block::Backbone).without(Block::Adapter);
            for b in encoder.iter() {
                s.insert(b);
            }
            s
        }
        Stage::Meta => {
            let flags = train.meta_learn;
            let mut s = BlockSet::empty();
            if flags.encoder {
                for b in encoder.iter() {
                    s.insert(b);
                }
            }
            if flags.temporal {
                s.insert(Block::Temporal);
            }
            if flags.tokenizer {
                s.insert(Block::Tokenizer);
            }
            if flags.decoder {
                s.insert(Block::Decoder);
            }
            s
        }
    };
    set.without(Block::Text)
}

/// Per-snippet labels of a query on the episode's classes: the local index
/// of the covering class, or `ways` for background.
pub fn snippet_labels(data: &EpisodeData<'_>, query: usize, snippets: usize) -> Vec<usize> {
    let ways = data.class_ids.len();
    let ann = data.queries[query].annotations_on(snippets);
    (0..snippets)
        .map(|t| {
            ann.iter()
                .filter(|a| a.covers(t))
                .find_map(|a| data.local_label(a.class_id))
                .unwrap_or(ways)
        })
        .collect()
}

/// The stage objective of one episode and its terms.
pub fn episode_loss(
    model: &Model,
    t: &Tape,
    data: &EpisodeData<'_>,
    stage: Stage,
    mode: Mode,
    delta_bg: f64,
) -> Result<(Var, LossReport)> {
    let opts = ForwardOptions {
        mode,
        heads: stage == Stage::Base,
        auxiliary: true,
        strict_support: true,
    };
    let out = model.forward_episode(t, data, opts)?;
    let l = model.snippets();
    let zero = || t.constant(Matrix::zeros(1, 1));
    let mean = |t: &Tape, parts: &[Var]| -> Var {
        if parts.is_empty() {
            return zero();
        }
        let sum = parts[1..].iter().fold(parts[0], |acc, &p| t.add(acc, p));
        t.scale(sum, 1.0 / parts.len() as f64)
    };

    let (mut l_c, mut l_m, mut l_comp) = (zero(), zero(), zero());
    if stage == Stage::Base {
        let mut cls = Vec::new();
        let mut dice = Vec::new();
        let mut comp = Vec::new();
        for (qi, q) in out.queries.iter().enumerate() {
            cls.push(loss_classification(t, q.probs, &snippet_labels(data, qi, l))?);
            let ann = data.queries[qi].annotations_on(l);
            let targets = mask_targets(&ann, |c| data.local_label(c).is_some(), l);
            let (m, c) = loss_mask(t, q.masks, &targets)?;
            dice.push(m);
            comp.push(c);
        }
        l_c = mean(t, &cls);
        l_m = mean(t, &dice);
        l_comp = mean(t, &comp);
    }
    let support: Vec<Var> = out
        .support_masks
        .iter()
        .map(|s| {
            let g = Matrix::from_fn(
                1,
                s.ground_truth.len(),
                |_, j| if s.ground_truth[j] { 1.0 } else { 0.0 },
            );
            binary_cross_entropy(t, s.soft, &g)
        })
        .collect();
    l_comp = t.add(l_comp, mean(t, &support));

    let l_tok = match (out.text_only, out.video_embeddings) {
        (Some(z), Some(zbar)) => loss_token_contrastive(t, out.class_rows, z, zbar)?,
        _ => zero(),
    };
    let l_bg = loss_background(t, out.background, out.class_rows, delta_bg)?;

    let total = [l_c, l_m, l_comp, l_tok, l_bg][1..]
        .iter()
        .fold(l_c, |acc, &v| t.add(acc, v));
    let report = LossReport {
        stage,
        l_c: t.scalar(l_c),
        l_m: t.scalar(l_m),
        l_comp: t.scalar(l_comp),
        l_tok: t.scalar(l_tok),
        l_bg: t.scalar(l_bg),
        total: t.scalar(total),
    };
    Ok((total, report))
}

/// One structured log record per optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub mode: Mode,
    pub l_c: f64,
    pub l_m: f64,
    pub l_comp: f64,
    pub l_tok: f64,
    pub l_bg: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub steps: usize,
    /// Mean total loss over the first and the last tenth of the run.
    pub early_loss: f64,
    pub late_loss: f64,
}

/// Runs `steps` optimization steps of `stage`, one episode each.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut Model,
    dataset: &Dataset,
    train: &TrainConfig,
    stage: Stage,
    steps: usize,
    lr: f64,
    seed: u64,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<TrainSummary> {
    let trainable = trainable_blocks(stage, &model.config, train);
    let salt = match stage {
        Stage::Base => BASE_STREAM,
        Stage::Meta => META_STREAM,
    };
    let split = &dataset.split.base;
    if split.is_empty() {
        return Err(Error::Data("base split is empty".into()));
    }
    let stream = episode_stream(
        &dataset.videos,
        &dataset.class_names,
        split,
        train.ways,
        train.shots,
        steps.max(1),
        seed ^ salt,
    )?;
    let mut adam = Adam::new(lr);
    adam.clip_norm = Some(train.clip_norm);
    let start = Instant::now();
    let mut totals = Vec::with_capacity(steps);
    for step in 0..steps {
        let episode = stream.get(step)?;
        let data = EpisodeData::new(&episode, &dataset.videos);
        let mode = if stage == Stage::Base
            && train.text_dropout > 0.0
            && episode_rng(seed ^ DROPOUT_STREAM, step as u64).random::<f64>() < train.text_dropout
        {
            Mode::Fs
        } else {
            Mode::Mmfs
        };
        let t = Tape::new(trainable);
        let (loss, report) = episode_loss(model, &t, &data, stage, mode, train.delta_bg)?;
        if !report.is_finite() {
            return Err(Error::Divergence {
                stage: stage.to_string(),
                step,
                detail: format!("{report:?}"),
            });
        }
        let grads = t.backward(loss);
        let grad_norm = adam.step(&mut model.params, &grads, trainable);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                stage: stage.to_string(),
                step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        totals.push(report.total);
        log(&StepRecord {
            step,
            stage,
            mode,
            l_c: report.l_c,
            l_m: report.l_m,
            l_comp: report.l_comp,
            l_tok: report.l_tok,
            l_bg: report.l_bg,
            total: report.total,
            lr,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let tenth = (totals.len() / 10).max(1).min(totals.len().max(1));
    let avg = |s: &[f64]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().sum::<f64>() / s.len() as f64
        }
    };
    Ok(TrainSummary {
        stage,
        steps,
        early_loss: avg(&totals[..tenth.min(totals.len())]),
        late_loss: avg(&totals[totals.len().saturating_sub(tenth)..]),
    })
}

/// Supervised training on base-class episodes.
pub fn base_train(
    model: &mut Model,
    dataset: &Dataset,
    train: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<TrainSummary> {
    run_stage(
        model,
        dataset,
        train,
        Stage::Base,
        train.base_steps,
        train.base_lr,
        seed,
        log,
    )
}

/// Meta-training on base-class episodes without query labels.
pub fn meta_train(
    model: &mut Model,
    dataset: &Dataset,
    train: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<TrainSummary> {
    run_stage(
        model,
        dataset,
        train,
        Stage::Meta,
        train.meta_episodes,
        train.meta_lr,
        seed,
        log,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderMode, MetaLearnFlags};
    use crate::data::{generate_synthetic_dataset, SplitRatios, SynthConfig};

    fn dataset() -> Dataset {
        let cfg = SynthConfig {
            num_classes: 6,
            videos_per_class: 4,
            min_snippets: 12,
            max_snippets: 20,
            feature_dim: 8,
            split: SplitRatios {
                base: 0.5,
                validation: 0.17,
                novel: 0.33,
            },
            ..SynthConfig::default()
        };
        generate_synthetic_dataset(&cfg, 3).unwrap()
    }

    fn model(ds: &Dataset) -> Model {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            snippets: 10,
            adapter_rank: 4,
            num_queries: 3,
            ..ModelConfig::default()
        };
        Model::for_dataset(cfg, ds, 1).unwrap()
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            base_steps: 3,
            meta_episodes: 3,
            ways: 2,
            shots: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn text_encoder_is_never_trainable() {
        let mcfg = ModelConfig {
            encoder_mode: EncoderMode::FullTune,
            ..ModelConfig::default()
        };
        for stage in [Stage::Base, Stage::Meta] {
            assert!(!trainable_blocks(stage, &mcfg, &TrainConfig::default()).contains(Block::Text));
        }
        let base = trainable_blocks(Stage::Base, &ModelConfig::default(), &TrainConfig::default());
        assert!(base.contains(Block::Adapter) && !base.contains(Block::Backbone));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = dataset();
        let mut m = model(&ds);
        let before = m.params.clone();
        let cfg = TrainConfig {
            base_lr: 0.0,
            base_steps: 1,
            ..train_cfg()
        };
        base_train(&mut m, &ds, &cfg, 0, &mut |_| {}).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn meta_training_with_no_flags_changes_nothing() {
        let ds = dataset();
        let mut m = model(&ds);
        let before = m.params.clone();
        let cfg = TrainConfig {
            meta_learn: MetaLearnFlags::none(),
            meta_lr: 1e-2,
            ..train_cfg()
        };
        meta_train(&mut m, &ds, &cfg, 0, &mut |_| {}).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn text_parameters_survive_training_bit_identically() {
        let ds = dataset();
        let mut m = model(&ds);
        let text_before: Vec<Matrix> = m
            .params
            .iter()
            .filter(|(_, e)| e.block == Block::Text)
            .map(|(_, e)| e.value.clone())
            .collect();
        let cfg = TrainConfig {
            base_lr: 1e-2,
            meta_lr: 1e-2,
            ..train_cfg()
        };
        let mut records = Vec::new();
        base_train(&mut m, &ds, &cfg, 0, &mut |r| records.push(r.clone())).unwrap();
        meta_train(&mut m, &ds, &cfg, 0, &mut |r| records.push(r.clone())).unwrap();
        let text_after: Vec<Matrix> = m
            .params
            .iter()
            .filter(|(_, e)| e.block == Block::Text)
            .map(|(_, e)| e.value.clone())
            .collect();
        assert_eq!(text_before, text_after);
        assert_eq!(records.len(), 6);
        assert!(records[..3].iter().all(|r| r.stage == Stage::Base && r.l_c > 0.0));
        assert!(records[3..]
            .iter()
            .all(|r| r.stage == Stage::Meta && r.l_c == 0.0 && r.l_m == 0.0));
    }

    #[test]
    fn meta_loss_ignores_query_labels() {
        let ds = dataset();
        let m = model(&ds);
        let ep = crate::episode::sample_episode(
            &ds.videos,
            &ds.class_names,
            &ds.split.base,
            2,
            1,
            &mut episode_rng(4, 0),
        )
        .unwrap();
        let data = EpisodeData::new(&ep, &ds.videos);
        let mut relabeled_videos: Vec<_> = data.queries.iter().map(|v| (*v).clone()).collect();
        for v in &mut relabeled_videos {
            for a in &mut v.annotations {
                a.class_id = (a.class_id + 1) % ds.num_classes();
            }
        }
        let relabeled = EpisodeData {
            queries: relabeled_videos.iter().collect(),
            ..data.clone()
        };
        let t = Tape::default();
        let (_, a) = episode_loss(&m, &t, &data, Stage::Meta, Mode::Mmfs, 0.1).unwrap();
        let (_, b) = episode_loss(&m, &t, &relabeled, Stage::Meta, Mode::Mmfs, 0.1).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    #[test]
    fn labels_mark_background_outside_episode_classes() {
        let ds = dataset();
        let ep = crate::episode::sample_episode(
            &ds.videos,
            &ds.class_names,
            &ds.split.base,
            2,
            1,
            &mut episode_rng(5, 0),
        )
        .unwrap();
        let data = EpisodeData::new(&ep, &ds.videos);
        let labels = snippet_labels(&data, 0, 10);
        assert!(labels.iter().all(|&c| c <= 2));
        assert!(labels.contains(&0));
    }
}
