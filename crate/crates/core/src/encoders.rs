//! Video backbone with residual adapters, temporal embedding, and the text
//! encoder with its token table.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::config::{AdapterPlacement, EncoderMode, ModelConfig};
use crate::data::{interpolation_matrix, Lexicon, VideoRecord};
use crate::error::{Error, Result};
use crate::nn::{BlockDims, Linear, TransformerBlock};
use crate::params::{Block, BlockSet, Init, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Residual bottleneck: `x + up(gelu(down(x)))`.
#[derive(Clone, Debug)]
pub struct AdapterUnit {
    pub down: Linear,
    pub up: Linear,
}

impl AdapterUnit {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rank: usize, rng: &mut impl Rng) -> Self {
        Self {
            down: Linear::new(
                store,
                &format!("{name}.down"),
                Block::Adapter,
                (dim, rank),
                Init::FanIn(1.0),
                true,
                rng,
            ),
            up: Linear::new(
                store,
                &format!("{name}.up"),
                Block::Adapter,
                (rank, dim),
                Init::Zeros,
                true,
                rng,
            ),
        }
    }

    /// The residual branch alone.
    pub fn delta(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let h = t.gelu(self.down.forward(t, store, x));
        self.up.forward(t, store, h)
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        t.add(x, self.delta(t, store, x))
    }
}

/// Stand-in for a pretrained video encoder: an input projection and a stack
/// of transformer blocks, each paired with an adapter.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub input: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub adapters: Vec<AdapterUnit>,
    pub placement: AdapterPlacement,
    pub input_dim: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, input_dim: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let init = if input_dim == d {
            Init::Identity
        } else {
            Init::FanIn(1.0)
        };
        let input = Linear::new(
            store,
            "backbone.input",
            Block::Backbone,
            (input_dim, d),
            init,
            true,
            rng,
        );
        let dims = BlockDims {
            dim: d,
            heads: cfg.heads,
            ff_mult: cfg.ff_mult,
            out_gain: cfg.pretrained_gain,
        };
        let mut blocks = Vec::new();
        let mut adapters = Vec::new();
        for i in 0..cfg.backbone_blocks {
            blocks.push(TransformerBlock::new(
                store,
                &format!("backbone.block{i}"),
                Block::Backbone,
                dims,
                false,
                rng,
            ));
            adapters.push(AdapterUnit::new(
                store,
                &format!("backbone.adapter{i}"),
                d,
                cfg.adapter_rank,
                rng,
            ));
        }
        Self {
            input,
            blocks,
            adapters,
            placement: cfg.adapter_placement,
            input_dim,
        }
    }

    /// Raw snippet features `T x d_raw` to backbone features `T x D`.
    pub fn forward(&self, t: &Tape, store: &ParamStore, raw: Var) -> Result<Var> {
        let cols = t.shape(raw).1;
        if cols != self.input_dim {
            return Err(Error::Shape(format!(
                "backbone expects {}-dimensional snippet features, got {cols}",
                self.input_dim
            )));
        }
        let mut x = self.input.forward(t, store, raw);
        for (block, adapter) in self.blocks.iter().zip(&self.adapters) {
            x = match self.placement {
                AdapterPlacement::Sequential => adapter.forward(t, store, block.forward_self(t, store, x, None)),
                AdapterPlacement::Parallel => {
                    let delta = adapter.delta(t, store, x);
                    t.add(block.forward_self(t, store, x, None), delta)
                }
            };
        }
        Ok(x)
    }
}

/// Blocks that receive gradients for a given backbone mode.
pub fn backbone_trainable(mode: EncoderMode) -> BlockSet {
    match mode {
        EncoderMode::Frozen => BlockSet::empty(),
        EncoderMode::Adapters => BlockSet::empty().with(Block::Adapter),
        EncoderMode::FullTune => BlockSet::empty().with(Block::Adapter).with(Block::Backbone),
    }
}

/// Self-attention over rescaled snippets; no positional encoding.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub blocks: Vec<TransformerBlock>,
}

impl TemporalEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let dims = BlockDims {
            dim: cfg.dim,
            heads: cfg.heads,
            ff_mult: cfg.ff_mult,
            out_gain: cfg.init_gain,
        };
        let blocks = (0..cfg.temporal_blocks)
            .map(|i| TransformerBlock::new(store, &format!("temporal.block{i}"), Block::Temporal, dims, false, rng))
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        self.blocks.iter().fold(x, |x, b| b.forward_self(t, store, x, None))
    }
}

const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Word-level vocabulary with a per-character fallback.
///
/// Ids `0..words.len()` are words, followed by one id per character in
/// `a-z0-9` and a final unknown-character id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut list: Vec<String> = words.into_iter().map(|w| w.to_lowercase()).collect();
        list.sort();
        list.dedup();
        let index = list.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words: list, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len() + CHARSET.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn char_id(&self, c: char) -> usize {
        let base = self.words.len();
        match CHARSET.find(c) {
            Some(i) => base + i,
            None => base + CHARSET.len(),
        }
    }

    /// Lowercase words; unknown words become character tokens.
    pub fn tokenize(&self, name: &str) -> Result<Vec<usize>> {
        let words = crate::data::words_of(name);
        if words.is_empty() {
            return Err(Error::InvalidArgument(format!("class name {name:?} has no tokens")));
        }
        let mut ids = Vec::new();
        for w in words {
            match self.index.get(&w) {
                Some(&id) => ids.push(id),
                None => ids.extend(w.chars().map(|c| self.char_id(c))),
            }
        }
        Ok(ids)
    }
}

/// Token table plus a bidirectional transformer. Both stay frozen.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub max_tokens: usize,
}

impl TextEncoder {
    /// Word rows come from the lexicon when it has them; every other row
    /// is a random unit vector.
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        vocab: &Vocabulary,
        lexicon: Option<&Lexicon>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        if let Some(lex) = lexicon {
            if lex.dim != d && !lex.words.is_empty() {
                return Err(Error::Shape(format!(
                    "lexicon dimension {} differs from model dim {d}",
                    lex.dim
                )));
            }
        }
        let mut table = Matrix::zeros(vocab.len(), d);
        for i in 0..vocab.len() {
            let word = vocab.words().get(i);
            let row: Vec<f64> = match word.and_then(|w| lexicon.and_then(|l| l.words.get(w))) {
                Some(v) => v.clone(),
                None => {
                    let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|x| x / n).collect()
                }
            };
            table.row_mut(i).copy_from_slice(&row);
        }
        let table = store.insert("text.table".into(), Block::Text, table);
        let dims = BlockDims {
            dim: d,
            heads: cfg.heads,
            ff_mult: cfg.ff_mult,
            out_gain: cfg.pretrained_gain,
        };
        let blocks = (0..cfg.text_blocks)
            .map(|i| TransformerBlock::new(store, &format!("text.block{i}"), Block::Text, dims, false, rng))
            .collect();
        Ok(Self {
            table,
            blocks,
            max_tokens: cfg.max_prompt_tokens,
        })
    }

    /// `T_c`: one embedding row per token of `name`.
    pub fn embed_class_name(&self, t: &Tape, store: &ParamStore, vocab: &Vocabulary, name: &str) -> Result<Var> {
        let ids = vocab.tokenize(name)?;
        let table = t.param(store, self.table);
        let rows = t.shape(table).0;
        let onehot = Matrix::from_fn(ids.len(), rows, |i, j| if ids[i] == j { 1.0 } else { 0.0 });
        Ok(t.matmul(t.constant(onehot), table))
    }

    /// Encodes a token sequence into one unit-norm row.
    pub fn encode(&self, t: &Tape, store: &ParamStore, prompt: Var) -> Result<Var> {
        let len = t.shape(prompt).0;
        if len > self.max_tokens {
            return Err(Error::PromptTooLong {
                len,
                max: self.max_tokens,
            });
        }
        let h = self
            .blocks
            .iter()
            .fold(prompt, |x, b| b.forward_self(t, store, x, None));
        Ok(t.normalize_rows(t.mean_rows(h), 1e-12))
    }
}

/// `E`: backbone, rescale to `L` snippets, temporal encoder.
pub fn encode_video(
    t: &Tape,
    store: &ParamStore,
    backbone: &Backbone,
    temporal: &TemporalEncoder,
    video: &VideoRecord,
    snippets: usize,
) -> Result<Var> {
    let raw = t.constant(video.features.to_matrix());
    let f = backbone.forward(t, store, raw)?;
    let r = interpolation_matrix(video.length(), snippets);
    let fe = t.matmul(t.constant(r), f);
    Ok(temporal.forward(t, store, fe))
}
