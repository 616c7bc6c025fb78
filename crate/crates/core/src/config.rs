//! Experiment configuration.
//!
//! One TOML file drives every stage. Unknown keys are rejected and every
//! field has a default, so `ExperimentConfig::default()` serialized with
//! [`ExperimentConfig::template`] is a complete, runnable config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitKind, SplitRatios, SynthConfig};
use crate::error::{Error, Result};

/// How the video backbone is adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Backbone and adapters stay fixed.
    Frozen,
    /// Only adapters train.
    Adapters,
    /// Backbone and adapters train.
    FullTune,
}

/// Where the adapters sit relative to each backbone block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    /// `adapter(block(x))`.
    Sequential,
    /// `block(x) + adapter_delta(x)`.
    Parallel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    SetAttention,
    Cnn1d,
}

/// Source of the context tokens placed before the class-name tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptDesign {
    /// Context tokens predicted from masked support videos.
    Multimodal,
    /// Shared context projected from pooled support features.
    LearnableVisual,
    /// Shared learned context vectors.
    LearnableText,
    /// Shared learned context vectors, text transformer bypassed.
    Scratch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextScope {
    ClassSpecific,
    ClassGeneric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDecoderKind {
    /// Attention restricted to the previous layer's foreground.
    MaskedAttention,
    /// Unrestricted cross-attention.
    Attention,
    /// Temporal convolution, no queries.
    Cnn1d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    Query,
    Support,
    Random,
}

/// Features the mask localizer consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInput {
    Regulated,
    Unregulated,
}

/// Deployment mode: visual support only, both modalities, or names only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "FS", alias = "fs")]
    Fs,
    #[serde(rename = "MMFS", alias = "mmfs")]
    Mmfs,
    #[serde(rename = "ZS", alias = "zs")]
    Zs,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Fs => "FS",
            Mode::Mmfs => "MMFS",
            Mode::Zs => "ZS",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fs" => Ok(Mode::Fs),
            "mmfs" => Ok(Mode::Mmfs),
            "zs" => Ok(Mode::Zs),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding dimension D.
    pub dim: usize,
    /// Snippets per video after rescaling, L.
    pub snippets: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub adapter_rank: usize,
    pub backbone_blocks: usize,
    pub temporal_blocks: usize,
    pub text_blocks: usize,
    pub tokenizer_blocks: usize,
    pub decoder_layers: usize,
    /// Action queries N_q of the support mask decoder.
    pub num_queries: usize,
    /// Classifier temperature.
    pub tau: f64,
    /// Support foreground threshold.
    pub theta_bin: f64,
    pub tokens_per_class: usize,
    pub max_prompt_tokens: usize,
    /// Width of the dynamic temporal kernels in the mask localizer.
    pub mask_kernel: usize,
    /// Residual output gain of the frozen pretrained encoders at init.
    pub pretrained_gain: f64,
    /// Residual output gain of blocks trained from scratch.
    pub init_gain: f64,
    pub encoder_mode: EncoderMode,
    pub adapter_placement: AdapterPlacement,
    pub tokenizer: TokenizerKind,
    pub prompt_design: PromptDesign,
    pub context_scope: ContextScope,
    pub mask_decoder: MaskDecoderKind,
    pub query_init: QueryInit,
    pub query_regulation: bool,
    pub mask_head_input: HeadInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            snippets: 100,
            heads: 4,
            ff_mult: 2,
            adapter_rank: 16,
            backbone_blocks: 2,
            temporal_blocks: 1,
            text_blocks: 2,
            tokenizer_blocks: 2,
            decoder_layers: 2,
            num_queries: 8,
            tau: 0.7,
            theta_bin: 0.5,
            tokens_per_class: 1,
            max_prompt_tokens: 77,
            mask_kernel: 3,
            pretrained_gain: 0.1,
            init_gain: 0.5,
            encoder_mode: EncoderMode::Adapters,
            adapter_placement: AdapterPlacement::Sequential,
            tokenizer: TokenizerKind::SetAttention,
            prompt_design: PromptDesign::Multimodal,
            context_scope: ContextScope::ClassSpecific,
            mask_decoder: MaskDecoderKind::MaskedAttention,
            query_init: QueryInit::Query,
            query_regulation: true,
            mask_head_input: HeadInput::Regulated,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("model.{m}")));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail("dim: must be a positive multiple of heads");
        }
        if self.snippets < 2 {
            return fail("snippets: need at least 2");
        }
        if self.adapter_rank == 0 || self.ff_mult == 0 {
            return fail("adapter_rank/ff_mult: must be positive");
        }
        if self.num_queries == 0 {
            return fail("num_queries: must be at least 1");
        }
        if self.decoder_layers == 0 || self.tokenizer_blocks == 0 {
            return fail("decoder_layers/tokenizer_blocks: must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau: must be positive");
        }
        if !(self.theta_bin > 0.0 && self.theta_bin < 1.0) {
            return fail("theta_bin: must lie in (0, 1)");
        }
        if self.tokens_per_class == 0 || self.tokens_per_class >= self.max_prompt_tokens {
            return fail("tokens_per_class: must be in [1, max_prompt_tokens)");
        }
        if self.mask_kernel.is_multiple_of(2) {
            return fail("mask_kernel: must be odd");
        }
        Ok(())
    }
}

/// Blocks updated during meta-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaLearnFlags {
    pub encoder: bool,
    pub temporal: bool,
    pub tokenizer: bool,
    pub decoder: bool,
}

impl Default for MetaLearnFlags {
    fn default() -> Self {
        Self {
            encoder: true,
            temporal: true,
            tokenizer: true,
            decoder: true,
        }
    }
}

impl MetaLearnFlags {
    pub fn none() -> Self {
        Self {
            encoder: false,
            temporal: false,
            tokenizer: false,
            decoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub meta_lr: f64,
    /// Base-training steps; one episode per step.
    pub base_steps: usize,
    pub meta_episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub delta_bg: f64,
    pub clip_norm: f64,
    /// Probability of training a base step with text replaced by
    /// placeholders.
    pub text_dropout: f64,
    pub meta_learn: MetaLearnFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            meta_lr: 1e-4,
            base_steps: 600,
            meta_episodes: 300,
            ways: 3,
            shots: 2,
            delta_bg: 0.1,
            clip_norm: 1.0,
            text_dropout: 0.0,
            meta_learn: MetaLearnFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("training.{m}")));
        if !(self.base_lr >= 0.0 && self.meta_lr >= 0.0) {
            return fail("base_lr/meta_lr: must be non-negative");
        }
        if self.ways == 0 || self.shots == 0 {
            return fail("ways/shots: must be at least 1");
        }
        if !(self.delta_bg > -1.0 && self.delta_bg < 1.0) {
            return fail("delta_bg: must lie in (-1, 1)");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm: must be positive");
        }
        if !(0.0..=1.0).contains(&self.text_dropout) {
            return fail("text_dropout: must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: Mode,
    pub split: SplitKind,
    pub ways: usize,
    pub shots: usize,
    pub episodes: usize,
    pub tiou_grid: Vec<f64>,
    /// Mask thresholds used when decoding segments.
    pub thresholds: Vec<f64>,
    pub top_k: usize,
    pub sigma: f64,
    pub score_floor: f64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Mmfs,
            split: SplitKind::Novel,
            ways: 3,
            shots: 2,
            episodes: 250,
            tiou_grid: thumos_grid(),
            thresholds: default_thresholds(),
            top_k: 20,
            sigma: 0.5,
            score_floor: 0.001,
            workers: 1,
        }
    }
}

/// tIoU thresholds 0.3, 0.4, ..., 0.7.
pub fn thumos_grid() -> Vec<f64> {
    vec![0.3, 0.4, 0.5, 0.6, 0.7]
}

/// tIoU thresholds 0.5, 0.55, ..., 0.95.
pub fn activitynet_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Mask thresholds 0.1, 0.2, ..., 0.9.
pub fn default_thresholds() -> Vec<f64> {
    (1..10).map(|i| i as f64 / 10.0).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("eval.{m}")));
        if self.mode != Mode::Zs && (self.ways == 0 || self.shots == 0) {
            return fail("ways/shots: must be at least 1 outside ZS mode");
        }
        if self.episodes == 0 {
            return fail("episodes: must be at least 1");
        }
        if self.tiou_grid.is_empty() || self.tiou_grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return fail("tiou_grid: values must lie in (0, 1]");
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return fail("thresholds: values must lie in (0, 1)");
        }
        if self.top_k == 0 {
            return fail("top_k: must be at least 1");
        }
        if !(self.sigma > 0.0) {
            return fail("sigma: must be positive");
        }
        if self.workers == 0 {
            return fail("workers: must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Dataset directory; written by `generate`, read by the other stages.
    pub path: String,
    pub synthetic: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: "data".into(),
            synthetic: SynthConfig {
                split: SplitRatios {
                    base: 0.5,
                    validation: 0.2,
                    novel: 0.3,
                },
                ..SynthConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.synthetic.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("dataset.synthetic.{m}")),
            other => other,
        })?;
        self.model.validate()?;
        self.training.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// The full default config as TOML.
    pub fn template() -> String {
        let body = toml::to_string_pretty(&Self::default()).expect("default config serializes");
        format!(
            "# Experiment configuration. Every key is optional; omitted keys take the\n\
             # values shown here. Unknown keys are rejected.\n\n{body}"
        )
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of everything that shapes a trained model: seed, dataset, model
    /// and training sections. Evaluation settings are excluded.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            seed: u64,
            dataset: &'a DatasetConfig,
            model: &'a ModelConfig,
            training: &'a TrainConfig,
        }
        let json = serde_json::to_vec(&Hashed {
            seed: self.seed,
            dataset: &self.dataset,
            model: &self.model,
            training: &self.training,
        })
        .expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
