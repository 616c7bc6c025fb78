//! Support foreground masking and query feature regulation.
//!
//! A query-initialized mask decoder predicts `N_q` soft masks over each
//! support video, a learned weighting merges them into one mask per shot,
//! and the binarized foreground of the shots is averaged and offered to the
//! query features through cross-attention.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{MaskDecoderKind, ModelConfig, QueryInit};
use crate::error::{Error, Result};
use crate::nn::{BlockDims, Conv1d, Linear, Mlp, TransformerBlock, MASKED_LOGIT};
use crate::params::{Block, Init, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Probability above which a location stays visible to the next decoder
/// layer.
const ATTENTION_KEEP: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub kind: MaskDecoderKind,
    pub init: QueryInit,
    pub num_queries: usize,
    query_mlp: Mlp,
    query_embed: ParamId,
    layers: Vec<TransformerBlock>,
    mask_mlp: Mlp,
    conv: Option<(Conv1d, Linear)>,
    pub weight_q: ParamId,
    pub bias_q: ParamId,
    dim: usize,
}

impl MaskDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let b = Block::Decoder;
        let nq = cfg.num_queries;
        let dims = BlockDims {
            dim: d,
            heads: cfg.heads,
            ff_mult: cfg.ff_mult,
            out_gain: cfg.init_gain,
        };
        let embed_std = if cfg.query_init == QueryInit::Random { 1.0 } else { 0.5 };
        let conv = (cfg.mask_decoder == MaskDecoderKind::Cnn1d).then(|| {
            (
                Conv1d::new(store, "decoder.conv", b, (d, d), 3, 1.0, rng),
                Linear::new(store, "decoder.conv_out", b, (d, nq), Init::FanIn(1.0), true, rng),
            )
        });
        let weight = Matrix::filled(1, nq, 6.0 / nq as f64);
        Self {
            kind: cfg.mask_decoder,
            init: cfg.query_init,
            num_queries: nq,
            query_mlp: Mlp::new(store, "decoder.query_mlp", b, (d, d, d), 1.0, rng),
            query_embed: store.add("decoder.query_embed", b, nq, d, Init::Normal(embed_std), rng),
            layers: (0..cfg.decoder_layers)
                .map(|i| TransformerBlock::new(store, &format!("decoder.layer{i}"), b, dims, true, rng))
                .collect(),
            mask_mlp: Mlp::new(store, "decoder.mask_mlp", b, (d, d, d), 1.0, rng),
            conv,
            weight_q: store.insert("decoder.weight_q".into(), b, weight),
            bias_q: store.insert("decoder.bias_q".into(), b, Matrix::filled(1, 1, -3.0)),
            dim: d,
        }
    }

    fn queries(&self, t: &Tape, store: &ParamStore, eq: Var, shots: &[Var]) -> Var {
        let embed = t.param(store, self.query_embed);
        let pooled = match self.init {
            QueryInit::Random => return embed,
            QueryInit::Query => t.mean_rows(eq),
            QueryInit::Support => {
                let means: Vec<Var> = shots.iter().map(|&s| t.mean_rows(s)).collect();
                t.mean_rows(t.concat_rows(&means))
            }
        };
        let q = self.query_mlp.forward(t, store, pooled);
        t.add(t.repeat_rows(q, self.num_queries), embed)
    }

    /// Mask logits `B_q E_sᵀ / sqrt(D)` for decoded queries `h`.
    fn mask_logits(&self, t: &Tape, store: &ParamStore, h: Var, x: Var) -> Var {
        let b = self.mask_mlp.forward(t, store, h);
        t.scale(t.matmul_t(b, x), 1.0 / (self.dim as f64).sqrt())
    }

    /// `𝓛_q`: one `N_q x L` soft mask per support shot.
    pub fn decode_support_masks(&self, t: &Tape, store: &ParamStore, eq: Var, shots: &[Var]) -> Result<Vec<Var>> {
        if shots.is_empty() {
            return Err(Error::InvalidArgument("mask decoder needs at least one shot".into()));
        }
        let d = t.shape(eq).1;
        for &s in shots {
            if t.shape(s).1 != d {
                return Err(Error::Shape(format!(
                    "support features are {}-dimensional, query features {d}",
                    t.shape(s).1
                )));
            }
        }
        if let Some((conv, out)) = &self.conv {
            return Ok(shots
                .iter()
                .map(|&x| {
                    let h = t.gelu(conv.forward(t, store, x));
                    t.sigmoid(t.transpose(out.forward(t, store, h)))
                })
                .collect());
        }
        let q = self.queries(t, store, eq, shots);
        let mut out = Vec::with_capacity(shots.len());
        for &x in shots {
            let mut h = q;
            for (l, layer) in self.layers.iter().enumerate() {
                let bias = (l > 0 && self.kind == MaskDecoderKind::MaskedAttention).then(|| {
                    let logits = self.mask_logits(t, store, h, x);
                    let probs = t.value(logits).map(crate::autodiff::sigmoid);
                    attention_bias(&probs)
                });
                h = layer.forward_cross(t, store, h, x, bias.as_ref());
            }
            out.push(t.sigmoid(self.mask_logits(t, store, h, x)));
        }
        Ok(out)
    }
}

/// Additive bias that hides locations below [`ATTENTION_KEEP`]. A query
/// with no visible location attends everywhere.
fn attention_bias(probs: &Matrix) -> Matrix {
    let mut bias = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        if probs.row(i).iter().any(|&p| p >= ATTENTION_KEEP) {
            for (b, &p) in bias.row_mut(i).iter_mut().zip(probs.row(i)) {
                if p < ATTENTION_KEEP {
                    *b = MASKED_LOGIT;
                }
            }
        }
    }
    bias
}

/// `𝓛̂ = sigmoid(W_q 𝓛_q + b_q)` per shot. `weights` has one row per shot
/// or a single row shared by all shots; `bias` is `1 x 1`.
pub fn weigh_queries(t: &Tape, masks: &[Var], weights: Var, bias: Var) -> Result<Vec<Var>> {
    let (rows, q) = t.shape(weights);
    if rows != 1 && rows != masks.len() {
        return Err(Error::Shape(format!("{rows} weight rows for {} shots", masks.len())));
    }
    if t.shape(bias) != (1, 1) {
        return Err(Error::Shape("query bias must be 1 x 1".into()));
    }
    let mut out = Vec::with_capacity(masks.len());
    for (k, &m) in masks.iter().enumerate() {
        let (mq, l) = t.shape(m);
        if mq != q {
            return Err(Error::Shape(format!("shot {k}: {mq} query masks, {q} weights")));
        }
        let w = if rows == 1 {
            weights
        } else {
            t.slice_rows(weights, k, 1)
        };
        let b = t.matmul(bias, t.constant(Matrix::filled(1, l, 1.0)));
        out.push(t.sigmoid(t.add(t.matmul(w, m), b)));
    }
    Ok(out)
}

/// Soft per-shot foreground and its binarization.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    /// `K x L` values in `[0, 1]`.
    pub soft: Matrix,
    pub binary: Vec<Vec<bool>>,
    pub threshold: f64,
}

impl ForegroundMask {
    pub fn new(soft: Matrix, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
        }
        let binary = (0..soft.rows())
            .map(|k| soft.row(k).iter().map(|&v| v >= threshold).collect())
            .collect();
        Ok(Self {
            soft,
            binary,
            threshold,
        })
    }

    pub fn retained(&self) -> usize {
        self.binary.iter().flatten().filter(|&&b| b).count()
    }
}

/// `E_s^fg`: each shot with its background snippets zeroed. A shot whose
/// mask keeps nothing is passed through unmasked. Returns the features and
/// the number of shots that fell back.
pub fn binarize_and_retrieve(t: &Tape, mask: &ForegroundMask, shots: &[Var]) -> Result<(Vec<Var>, usize)> {
    if mask.binary.len() != shots.len() {
        return Err(Error::Shape(format!(
            "{} masks for {} shots",
            mask.binary.len(),
            shots.len()
        )));
    }
    let mut fallbacks = 0;
    let mut out = Vec::with_capacity(shots.len());
    for (k, (&x, keep)) in shots.iter().zip(&mask.binary).enumerate() {
        if t.shape(x).0 != keep.len() {
            return Err(Error::Shape(format!(
                "shot {k}: mask length {} differs from features",
                keep.len()
            )));
        }
        if keep.iter().any(|&b| b) {
            let col = Matrix::from_fn(keep.len(), 1, |i, _| if keep[i] { 1.0 } else { 0.0 });
            out.push(t.mul_col(x, t.constant(col)));
        } else {
            log::warn!("support shot {k} has no predicted foreground; using all snippets");
            fallbacks += 1;
            out.push(x);
        }
    }
    Ok((out, fallbacks))
}

/// Cross-attention of query features over `[E_q; mean_k E_s^fg]`.
#[derive(Clone, Debug)]
pub struct QueryRegulator {
    pub block: TransformerBlock,
}

impl QueryRegulator {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let dims = BlockDims {
            dim: cfg.dim,
            heads: cfg.heads,
            ff_mult: cfg.ff_mult,
            out_gain: cfg.init_gain,
        };
        Self {
            block: TransformerBlock::new(store, "regulation.block", Block::Regulation, dims, true, rng),
        }
    }

    /// `Ē_q`, same shape as `E_q`.
    pub fn regulate_query(&self, t: &Tape, store: &ParamStore, eq: Var, foreground: &[Var]) -> Result<Var> {
        if foreground.is_empty() {
            return Err(Error::InvalidArgument("regulation needs at least one shot".into()));
        }
        for &f in foreground {
            if t.shape(f) != t.shape(eq) {
                return Err(Error::Shape(format!(
                    "support features {:?} differ from query features {:?}",
                    t.shape(f),
                    t.shape(eq)
                )));
            }
        }
        let sum = foreground[1..].iter().fold(foreground[0], |acc, &f| t.add(acc, f));
        let mean = t.scale(sum, 1.0 / foreground.len() as f64);
        let kv = t.concat_rows(&[eq, mean]);
        Ok(self.block.forward_cross(t, store, eq, kv, None))
    }
}
