//! The full detector and its episode forward pass in FS, MMFS and ZS mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{ContextScope, HeadInput, Mode, ModelConfig, PromptDesign};
use crate::data::{gt_to_mask, words_of, Dataset, Lexicon, VideoRecord};
use crate::encoders::{encode_video, Backbone, TemporalEncoder, TextEncoder, Vocabulary};
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::head::{classify_snippets, MaskLocalizer};
use crate::nn::select_rows;
use crate::params::ParamStore;
use crate::prompt::{assemble_prompt, build_prototypes, encode_prompts, PromptParams, SemanticsTokenizer};
use crate::regulation::{binarize_and_retrieve, weigh_queries, ForegroundMask, MaskDecoder, QueryRegulator};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Vocabulary,
    pub input_dim: usize,
    backbone: Backbone,
    temporal: TemporalEncoder,
    text: TextEncoder,
    tokenizer: SemanticsTokenizer,
    prompts: PromptParams,
    decoder: MaskDecoder,
    regulator: QueryRegulator,
    localizer: MaskLocalizer,
}

impl Model {
    /// Builds a freshly initialized model. Vocabulary rows found in
    /// `lexicon` take its embeddings.
    pub fn new(
        config: ModelConfig,
        input_dim: usize,
        words: Vec<String>,
        lexicon: Option<&Lexicon>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Shape("snippet features must have at least one dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let vocab = Vocabulary::new(words);
        let backbone = Backbone::new(&mut params, &config, input_dim, &mut rng);
        let temporal = TemporalEncoder::new(&mut params, &config, &mut rng);
        let text = TextEncoder::new(&mut params, &config, &vocab, lexicon, &mut rng)?;
        let tokenizer = SemanticsTokenizer::new(&mut params, &config, &mut rng);
        let prompts = PromptParams::new(&mut params, &config, &mut rng);
        let decoder = MaskDecoder::new(&mut params, &config, &mut rng);
        let regulator = QueryRegulator::new(&mut params, &config, &mut rng);
        let localizer = MaskLocalizer::new(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            params,
            vocab,
            input_dim,
            backbone,
            temporal,
            text,
            tokenizer,
            prompts,
            decoder,
            regulator,
            localizer,
        })
    }

    /// A model sized for `dataset`: its feature width, and a vocabulary of
    /// its lexicon (or of its class names when it has none).
    pub fn for_dataset(config: ModelConfig, dataset: &Dataset, seed: u64) -> Result<Self> {
        let input_dim = dataset
            .videos
            .first()
            .map(|v| v.features.cols())
            .ok_or_else(|| Error::Data("dataset has no videos".into()))?;
        let words: Vec<String> = match &dataset.lexicon {
            Some(lex) => lex.words.keys().cloned().collect(),
            None => dataset.class_names.iter().flat_map(|n| words_of(n)).collect(),
        };
        Self::new(config, input_dim, words, dataset.lexicon.as_ref(), seed)
    }

    pub fn snippets(&self) -> usize {
        self.config.snippets
    }

    /// `E` for one video.
    pub fn encode_video(&self, t: &Tape, video: &VideoRecord) -> Result<Var> {
        encode_video(
            t,
            &self.params,
            &self.backbone,
            &self.temporal,
            video,
            self.config.snippets,
        )
    }

    /// `T_c` for a class name.
    pub fn embed_class_name(&self, t: &Tape, name: &str) -> Result<Var> {
        self.text.embed_class_name(t, &self.params, &self.vocab, name)
    }

    /// Text-only prototype of each class name (`C x D`).
    pub fn text_prototypes(&self, t: &Tape, names: &[String]) -> Result<Var> {
        let prompts = names
            .iter()
            .map(|n| self.embed_class_name(t, n))
            .collect::<Result<Vec<_>>>()?;
        encode_prompts(t, &self.params, &self.text, &prompts, false)
    }

    /// Runs one episode. The query branch always encodes the query videos
    /// (the mask decoder is initialized from them) but the heads run only
    /// when `opts.heads` is set.
    pub fn forward_episode(&self, t: &Tape, ep: &EpisodeData<'_>, opts: ForwardOptions) -> Result<EpisodeForward> {
        let cfg = &self.config;
        let l = cfg.snippets;
        let ways = ep.class_names.len();
        if ways == 0 || ep.class_ids.len() != ways {
            return Err(Error::InvalidArgument(
                "episode needs matching class ids and names".into(),
            ));
        }
        let zs = opts.mode == Mode::Zs;
        if !zs && (ep.support.len() != ways || ep.support.iter().any(Vec::is_empty)) {
            return Err(Error::InvalidArgument(
                "every episode class needs at least one support shot".into(),
            ));
        }

        // Support features and ground-truth foreground.
        let mut shots: Vec<Var> = Vec::new();
        let mut shot_class: Vec<usize> = Vec::new();
        let mut shot_gt: Vec<Vec<bool>> = Vec::new();
        let mut class_shots: Vec<(Vec<Var>, Vec<Vec<bool>>)> = Vec::new();
        if !zs {
            for (i, videos) in ep.support.iter().enumerate() {
                let class_id = ep.class_ids[i];
                let mut masks: Vec<Vec<bool>> = videos
                    .iter()
                    .map(|v| gt_to_mask(&v.annotations_on(l), class_id, l))
                    .collect();
                if masks.iter().all(|m| !m.iter().any(|&b| b)) {
                    if opts.strict_support {
                        return Err(Error::EmptySupportMask(class_id));
                    }
                    log::warn!("class {class_id}: support ground truth is empty; using unmasked features");
                    masks.iter_mut().for_each(|m| m.fill(true));
                }
                let mut feats = Vec::with_capacity(videos.len());
                for (v, m) in videos.iter().zip(&masks) {
                    let e = self.encode_video(t, v)?;
                    shots.push(e);
                    shot_class.push(i);
                    shot_gt.push(m.clone());
                    feats.push(e);
                }
                class_shots.push((feats, masks));
            }
        }
        let masked = |t: &Tape, e: Var, m: &[bool]| {
            let col = Matrix::from_fn(m.len(), 1, |j, _| if m[j] { 1.0 } else { 0.0 });
            t.mul_col(e, t.constant(col))
        };

        // Prompts.
        let mut contexts: Vec<Option<Var>> = vec![None; ways];
        if !zs {
            match cfg.prompt_design {
                PromptDesign::Multimodal => {
                    let mut w = Vec::with_capacity(ways);
                    for (feats, masks) in &class_shots {
                        let hat: Vec<Var> = feats.iter().zip(masks).map(|(&e, m)| masked(t, e, m)).collect();
                        w.push(self.tokenizer.tokenize_support(t, &self.params, &hat, masks)?);
                    }
                    if cfg.context_scope == ContextScope::ClassGeneric {
                        let sum = w[1..].iter().fold(w[0], |acc, &x| t.add(acc, x));
                        let shared = t.scale(sum, 1.0 / ways as f64);
                        contexts = vec![Some(shared); ways];
                    } else {
                        contexts = w.into_iter().map(Some).collect();
                    }
                }
                PromptDesign::LearnableVisual => {
                    let mut rows = Vec::new();
                    for (e, m) in shots.iter().zip(&shot_gt) {
                        let idx: Vec<usize> = (0..l).filter(|&j| m[j]).collect();
                        if !idx.is_empty() {
                            rows.push(select_rows(t, *e, &idx));
                        }
                    }
                    let pooled = t.mean_rows(t.concat_rows(&rows));
                    let v = self.prompts.visual_proj.forward(t, &self.params, pooled);
                    let ctx = t.repeat_rows(v, cfg.tokens_per_class);
                    contexts = vec![Some(ctx); ways];
                }
                PromptDesign::LearnableText | PromptDesign::Scratch => {
                    let ctx = t.param(&self.params, self.prompts.context);
                    contexts = vec![Some(ctx); ways];
                }
            }
        }
        let mut prompt_seqs = Vec::with_capacity(ways);
        for (i, name) in ep.class_names.iter().enumerate() {
            let tokens = match opts.mode {
                Mode::Fs => t.param(&self.params, self.prompts.placeholder),
                Mode::Mmfs | Mode::Zs => self.embed_class_name(t, name)?,
            };
            prompt_seqs.push(assemble_prompt(t, contexts[i], Some(tokens), cfg.max_prompt_tokens)?);
        }
        let bypass = !zs && cfg.prompt_design == PromptDesign::Scratch;
        let class_rows = encode_prompts(t, &self.params, &self.text, &prompt_seqs, bypass)?;
        let background = t.param(&self.params, self.prompts.background);
        let prototypes = build_prototypes(t, class_rows, background);

        let (text_only, video_embeddings) = if opts.auxiliary && !zs {
            let z = self.text_prototypes(t, &ep.class_names)?;
            let mut rows = Vec::with_capacity(ways);
            for (feats, masks) in &class_shots {
                rows.push(self.tokenizer.video_embedding(t, feats, masks)?);
            }
            (Some(z), Some(t.concat_rows(&rows)))
        } else {
            (None, None)
        };

        // Query branch.
        let regulate = !zs && cfg.query_regulation;
        let mut support_masks = Vec::new();
        let mut queries = Vec::with_capacity(ep.queries.len());
        let mut fallbacks = 0;
        let weights = regulate.then(|| {
            (
                t.param(&self.params, self.decoder.weight_q),
                t.param(&self.params, self.decoder.bias_q),
            )
        });
        for q in &ep.queries {
            let eq = self.encode_video(t, q)?;
            let regulated = if let Some((w, b)) = weights {
                let lq = self.decoder.decode_support_masks(t, &self.params, eq, &shots)?;
                let soft = weigh_queries(t, &lq, w, b)?;
                let values: Vec<Matrix> = soft.iter().map(|&s| t.value(s).clone()).collect();
                let fg = ForegroundMask::new(Matrix::concat_rows(&values.iter().collect::<Vec<_>>()), cfg.theta_bin)?;
                let (fg_feats, fb) = binarize_and_retrieve(t, &fg, &shots)?;
                fallbacks += fb;
                for (k, &s) in soft.iter().enumerate() {
                    support_masks.push(SupportMask {
                        class_index: shot_class[k],
                        soft: s,
                        ground_truth: shot_gt[k].clone(),
                    });
                }
                self.regulator.regulate_query(t, &self.params, eq, &fg_feats)?
            } else {
                eq
            };
            if opts.heads {
                let probs = classify_snippets(t, regulated, prototypes, cfg.tau)?;
                let head_in = match cfg.mask_head_input {
                    HeadInput::Regulated => regulated,
                    HeadInput::Unregulated => eq,
                };
                let masks = self.localizer.localize_masks(t, &self.params, head_in);
                queries.push(QueryForward { probs, masks });
            }
        }

        Ok(EpisodeForward {
            prototypes,
            class_rows,
            background,
            text_only,
            video_embeddings,
            support_masks,
            queries,
            fallbacks,
        })
    }
}

/// Videos and names of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeData<'a> {
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    pub support: Vec<Vec<&'a VideoRecord>>,
    pub queries: Vec<&'a VideoRecord>,
}

impl<'a> EpisodeData<'a> {
    pub fn new(episode: &Episode, pool: &'a [VideoRecord]) -> Self {
        Self {
            class_ids: episode.class_ids.clone(),
            class_names: episode.class_names.clone(),
            support: episode
                .support
                .iter()
                .map(|s| s.iter().map(|&i| &pool[i]).collect())
                .collect(),
            queries: episode.query.iter().map(|&i| &pool[i]).collect(),
        }
    }

    /// Episode-local label of a global class id.
    pub fn local_label(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Run the classification and mask heads on the queries.
    pub heads: bool,
    /// Also compute text-only and video embeddings of each class.
    pub auxiliary: bool,
    /// Fail on a class whose support ground truth is empty instead of
    /// falling back to unmasked features.
    pub strict_support: bool,
}

impl ForwardOptions {
    pub fn inference(mode: Mode) -> Self {
        Self {
            mode,
            heads: true,
            auxiliary: false,
            strict_support: false,
        }
    }
}

/// Predicted foreground of one support shot, conditioned on one query.
#[derive(Clone, Debug)]
pub struct SupportMask {
    pub class_index: usize,
    /// `1 x L` soft mask.
    pub soft: Var,
    pub ground_truth: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct QueryForward {
    /// `L x (C + 1)` class probabilities.
    pub probs: Var,
    /// `L x L` masks, column `t` proposed by snippet `t`.
    pub masks: Var,
}

#[derive(Clone, Debug)]
pub struct EpisodeForward {
    /// `E_mm`, `(C + 1) x D`.
    pub prototypes: Var,
    pub class_rows: Var,
    /// Raw (unnormalized) background parameter.
    pub background: Var,
    pub text_only: Option<Var>,
    pub video_embeddings: Option<Var>,
    pub support_masks: Vec<SupportMask>,
    pub queries: Vec<QueryForward>,
    pub fallbacks: usize,
}
