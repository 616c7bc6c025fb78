//! Visual semantics tokenizer, multimodal prompts and class prototypes.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, TokenizerKind};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::nn::{select_rows, weighted_mean_rows, BlockDims, Conv1d, Linear, TransformerBlock};
use crate::params::{Block, Init, ParamId, ParamStore};

const NORM_EPS: f64 = 1e-12;

/// Permutation-invariant map from masked support features to context
/// tokens in the text embedding space.
///
/// The set-attention variant runs self-attention over the foreground
/// support snippets of all shots, then pools them with learned seeds that
/// cross-attend to the result.
#[derive(Clone, Debug)]
pub struct SemanticsTokenizer {
    pub kind: TokenizerKind,
    pub tokens: usize,
    seeds: Option<ParamId>,
    encoder: Option<TransformerBlock>,
    pool: Vec<TransformerBlock>,
    conv: Option<Conv1d>,
    offsets: Option<ParamId>,
    out: Linear,
}

impl SemanticsTokenizer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let b = Block::Tokenizer;
        let dims = BlockDims {
            dim: d,
            heads: cfg.heads,
            ff_mult: cfg.ff_mult,
            out_gain: cfg.init_gain,
        };
        let mut tok = Self {
            kind: cfg.tokenizer,
            tokens: cfg.tokens_per_class,
            seeds: None,
            encoder: None,
            pool: Vec::new(),
            conv: None,
            offsets: None,
            out: Linear::new(store, "tokenizer.out", b, (d, d), Init::Identity, true, rng),
        };
        match cfg.tokenizer {
            TokenizerKind::SetAttention => {
                tok.seeds = Some(store.add("tokenizer.seeds", b, cfg.tokens_per_class, d, Init::Normal(0.02), rng));
                tok.encoder = Some(TransformerBlock::new(store, "tokenizer.encoder", b, dims, false, rng));
                tok.pool = (0..cfg.tokenizer_blocks)
                    .map(|i| TransformerBlock::new(store, &format!("tokenizer.pool{i}"), b, dims, true, rng))
                    .collect();
            }
            TokenizerKind::Cnn1d => {
                tok.conv = Some(Conv1d::new(store, "tokenizer.conv", b, (d, d), 3, 1.0, rng));
                tok.offsets = Some(store.add("tokenizer.offsets", b, cfg.tokens_per_class, d, Init::Normal(0.1), rng));
            }
        }
        tok
    }

    /// `ŵ_c` (`tokens x D`) from the masked support shots of one class.
    /// `masks[k][i]` marks the foreground snippets of shot `k`.
    pub fn tokenize_support(&self, t: &Tape, store: &ParamStore, shots: &[Var], masks: &[Vec<bool>]) -> Result<Var> {
        check_shots(t, shots, masks)?;
        match self.kind {
            TokenizerKind::SetAttention => {
                let fg = foreground_rows(t, shots, masks)?;
                let encoder = self.encoder.as_ref().expect("set-attention encoder");
                let h = encoder.forward_self(t, store, fg, None);
                let mut s = t.param(store, self.seeds.expect("set-attention seeds"));
                for block in &self.pool {
                    s = block.forward_cross(t, store, s, h, None);
                }
                Ok(self.out.forward(t, store, s))
            }
            TokenizerKind::Cnn1d => {
                let conv = self.conv.as_ref().expect("cnn tokenizer conv");
                let mut pooled = Vec::with_capacity(shots.len());
                for (&x, m) in shots.iter().zip(masks) {
                    let y = t.gelu(conv.forward(t, store, x));
                    pooled.push(weighted_mean_rows(t, y, &mask_weights(m)));
                }
                let mean = t.scale(sum_all(t, &pooled), 1.0 / pooled.len() as f64);
                let v = self.out.forward(t, store, mean);
                let offsets = t.param(store, self.offsets.expect("cnn tokenizer offsets"));
                Ok(t.add(t.repeat_rows(v, self.tokens), offsets))
            }
        }
    }

    /// `z̄_c`: normalized mean of the foreground support snippets. It is a
    /// fixed target: no gradient flows back through it.
    pub fn video_embedding(&self, t: &Tape, shots: &[Var], masks: &[Vec<bool>]) -> Result<Var> {
        check_shots(t, shots, masks)?;
        let fg = foreground_rows(t, shots, masks)?;
        Ok(t.detach(t.normalize_rows(t.mean_rows(fg), NORM_EPS)))
    }
}

fn check_shots(t: &Tape, shots: &[Var], masks: &[Vec<bool>]) -> Result<()> {
    if shots.is_empty() {
        return Err(Error::InvalidArgument("tokenizer needs at least one shot".into()));
    }
    if shots.len() != masks.len() {
        return Err(Error::Shape(format!("{} shots but {} masks", shots.len(), masks.len())));
    }
    for (k, (&s, m)) in shots.iter().zip(masks).enumerate() {
        let v = t.value(s);
        if v.rows() != m.len() {
            return Err(Error::Shape(format!(
                "shot {k}: {} snippets but mask of {}",
                v.rows(),
                m.len()
            )));
        }
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("support shot {k}")));
        }
    }
    Ok(())
}

fn mask_weights(mask: &[bool]) -> Vec<f64> {
    if mask.iter().any(|&b| b) {
        mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    } else {
        vec![1.0; mask.len()]
    }
}

/// All foreground rows of all shots, stacked.
fn foreground_rows(t: &Tape, shots: &[Var], masks: &[Vec<bool>]) -> Result<Var> {
    let mut parts = Vec::new();
    for (&x, m) in shots.iter().zip(masks) {
        let idx: Vec<usize> = (0..m.len()).filter(|&i| m[i]).collect();
        if !idx.is_empty() {
            parts.push(select_rows(t, x, &idx));
        }
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("support masks select no snippets".into()));
    }
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        t.concat_rows(&parts)
    })
}

fn sum_all(t: &Tape, parts: &[Var]) -> Var {
    parts[1..].iter().fold(parts[0], |acc, &p| t.add(acc, p))
}

/// `[context][class tokens]`; either part may be absent, not both.
pub fn assemble_prompt(t: &Tape, context: Option<Var>, class_tokens: Option<Var>, max_tokens: usize) -> Result<Var> {
    let parts: Vec<Var> = context.into_iter().chain(class_tokens).collect();
    if parts.is_empty() {
        return Err(Error::InvalidArgument(
            "prompt has neither context nor class tokens".into(),
        ));
    }
    let len: usize = parts.iter().map(|&p| t.shape(p).0).sum();
    if len > max_tokens {
        return Err(Error::PromptTooLong { len, max: max_tokens });
    }
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        t.concat_rows(&parts)
    })
}

/// `ẑ`: one unit-norm row per prompt. With `bypass_text` the prompt tokens
/// are mean-pooled directly instead of passing the text transformer.
pub fn encode_prompts(
    t: &Tape,
    store: &ParamStore,
    text: &TextEncoder,
    prompts: &[Var],
    bypass_text: bool,
) -> Result<Var> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts to encode".into()));
    }
    let mut rows = Vec::with_capacity(prompts.len());
    for &p in prompts {
        rows.push(if bypass_text {
            let len = t.shape(p).0;
            if len > text.max_tokens {
                return Err(Error::PromptTooLong {
                    len,
                    max: text.max_tokens,
                });
            }
            t.normalize_rows(t.mean_rows(p), NORM_EPS)
        } else {
            text.encode(t, store, p)?
        });
    }
    Ok(t.concat_rows(&rows))
}

/// `E_mm`: class rows followed by the normalized background row.
pub fn build_prototypes(t: &Tape, class_rows: Var, background: Var) -> Var {
    t.concat_rows(&[class_rows, t.normalize_rows(background, NORM_EPS)])
}

/// Learned prompt pieces other than the tokenizer: the FS-mode text
/// placeholder, shared context vectors and the visual-prompt projection.
#[derive(Clone, Debug)]
pub struct PromptParams {
    pub placeholder: ParamId,
    pub context: ParamId,
    pub visual_proj: Linear,
    pub background: ParamId,
}

impl PromptParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let unit = 1.0 / (d as f64).sqrt();
        Self {
            placeholder: store.add("prompt.placeholder", Block::Prompt, 1, d, Init::Normal(unit), rng),
            context: store.add(
                "prompt.context",
                Block::Prompt,
                cfg.tokens_per_class,
                d,
                Init::Normal(unit),
                rng,
            ),
            visual_proj: Linear::new(
                store,
                "prompt.visual_proj",
                Block::Prompt,
                (d, d),
                Init::FanIn(1.0),
                true,
                rng,
            ),
            background: store.add("background", Block::Background, 1, d, Init::Normal(1.0), rng),
        }
    }
}
