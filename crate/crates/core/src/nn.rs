//! Layers built on the tape: linear maps, layer norm, multi-head attention
//! and pre-norm transformer blocks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{Block, Init, ParamId, ParamStore};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

/// Large negative logit used to exclude attention positions.
pub const MASKED_LOGIT: f64 = -1e9;

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        dims: (usize, usize),
        init: Init,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), block, dims.0, dims.1, init, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), block, 1, dims.1, Init::Zeros, rng));
        Self { weight, bias }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.param(store, self.weight);
        let y = t.matmul(x, w);
        match self.bias {
            Some(b) => t.add_row(y, t.param(store, b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, block: Block, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), block, 1, dim, Init::Ones, rng),
            shift: store.add(format!("{name}.shift"), block, 1, dim, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let n = t.layer_norm_rows(x, LN_EPS);
        let g = t.mul_row(n, t.param(store, self.gain));
        t.add_row(g, t.param(store, self.shift))
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        dims: (usize, usize, usize),
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(
                store,
                &format!("{name}.fc1"),
                block,
                (dims.0, dims.1),
                Init::FanIn(1.0),
                true,
                rng,
            ),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                block,
                (dims.1, dims.2),
                Init::FanIn(out_gain),
                true,
                rng,
            ),
        }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let h = t.gelu(self.fc1.forward(t, store, x));
        self.fc2.forward(t, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        dim: usize,
        heads: usize,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads >= 1 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        let lin = |store: &mut ParamStore, n: &str, gain: f64, rng: &mut _| {
            Linear::new(
                store,
                &format!("{name}.{n}"),
                block,
                (dim, dim),
                Init::FanIn(gain),
                true,
                rng,
            )
        };
        Self {
            q: lin(store, "q", 1.0, rng),
            k: lin(store, "k", 1.0, rng),
            v: lin(store, "v", 1.0, rng),
            o: lin(store, "o", out_gain, rng),
            heads,
        }
    }

    /// Attends from `query` rows to `memory` rows. `mask`, when given, is a
    /// `query_rows x memory_rows` additive logit bias.
    pub fn forward(&self, t: &Tape, store: &ParamStore, query: Var, memory: Var, mask: Option<&Matrix>) -> Var {
        let q = self.q.forward(t, store, query);
        let k = self.k.forward(t, store, memory);
        let v = self.v.forward(t, store, memory);
        let dim = t.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias = mask.map(|m| t.constant(m.clone()));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    t.slice_cols(q, h * dh, dh),
                    t.slice_cols(k, h * dh, dh),
                    t.slice_cols(v, h * dh, dh),
                )
            };
            let mut logits = t.scale(t.matmul_t(qh, kh), scale);
            if let Some(b) = bias {
                logits = t.add(logits, b);
            }
            let attn = t.softmax_rows(logits);
            outs.push(t.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.o.forward(t, store, merged)
    }
}

/// Pre-norm transformer block: attention then feed-forward, both residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub ln_mem: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Init gain of the residual output projections. Small values start the
    /// block close to the identity.
    pub out_gain: f64,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        dims: BlockDims,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let d = dims.dim;
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), block, d, rng),
            ln_mem: cross.then(|| LayerNorm::new(store, &format!("{name}.ln_mem"), block, d, rng)),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), block, d, dims.heads, dims.out_gain, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), block, d, rng),
            ff: Mlp::new(
                store,
                &format!("{name}.ff"),
                block,
                (d, d * dims.ff_mult, d),
                dims.out_gain,
                rng,
            ),
        }
    }

    pub fn forward_self(&self, t: &Tape, store: &ParamStore, x: Var, mask: Option<&Matrix>) -> Var {
        let h = self.ln_attn.forward(t, store, x);
        let x = t.add(x, self.attn.forward(t, store, h, h, mask));
        self.feed_forward(t, store, x)
    }

    pub fn forward_cross(&self, t: &Tape, store: &ParamStore, x: Var, memory: Var, mask: Option<&Matrix>) -> Var {
        let h = self.ln_attn.forward(t, store, x);
        let m = match &self.ln_mem {
            Some(ln) => ln.forward(t, store, memory),
            None => memory,
        };
        let x = t.add(x, self.attn.forward(t, store, h, m, mask));
        self.feed_forward(t, store, x)
    }

    fn feed_forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.ln_ff.forward(t, store, x);
        t.add(x, self.ff.forward(t, store, h))
    }
}

/// Rows `idx` of `x`, as a one-hot product so gradients flow back.
pub fn select_rows(t: &Tape, x: Var, idx: &[usize]) -> Var {
    let rows = t.shape(x).0;
    let pick = Matrix::from_fn(idx.len(), rows, |i, j| if idx[i] == j { 1.0 } else { 0.0 });
    t.matmul(t.constant(pick), x)
}

/// Weighted mean of rows: `sum_i w_i x_i / sum_i w_i`. Panics on zero
/// total weight.
pub fn weighted_mean_rows(t: &Tape, x: Var, weights: &[f64]) -> Var {
    let total: f64 = weights.iter().sum();
    assert!(total > 0.0, "weighted mean over zero total weight");
    let w = Matrix::from_fn(1, weights.len(), |_, j| weights[j] / total);
    t.matmul(t.constant(w), x)
}

/// Temporal convolution over the rows of an `L x D_in` sequence with zero
/// padding: `y[i] = b + sum_j x[i + j - w/2] W_j`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub taps: Vec<Linear>,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        block: Block,
        dims: (usize, usize),
        width: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(width % 2 == 1, "conv width must be odd");
        let tap_gain = gain / (width as f64).sqrt();
        let taps = (0..width)
            .map(|j| {
                Linear::new(
                    store,
                    &format!("{name}.tap{j}"),
                    block,
                    dims,
                    Init::FanIn(tap_gain),
                    j == width / 2,
                    rng,
                )
            })
            .collect();
        Self { taps }
    }

    pub fn forward(&self, t: &Tape, store: &ParamStore, x: Var) -> Var {
        let (l, d) = t.shape(x);
        let half = self.taps.len() / 2;
        let mut out: Option<Var> = None;
        for (j, tap) in self.taps.iter().enumerate() {
            let shifted = shift_rows(t, x, j as isize - half as isize, l, d);
            let y = tap.forward(t, store, shifted);
            out = Some(match out {
                Some(o) => t.add(o, y),
                None => y,
            });
        }
        out.expect("at least one tap")
    }
}

/// `out[i] = x[i + offset]`, zero outside the sequence.
fn shift_rows(t: &Tape, x: Var, offset: isize, l: usize, d: usize) -> Var {
    let k = offset.unsigned_abs();
    if offset == 0 {
        return x;
    }
    if k >= l {
        return t.constant(Matrix::zeros(l, d));
    }
    let pad = t.constant(Matrix::zeros(k, d));
    if offset > 0 {
        t.concat_rows(&[t.slice_rows(x, k, l - k), pad])
    } else {
        t.concat_rows(&[pad, t.slice_rows(x, 0, l - k)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::BlockSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(rng: &mut ChaCha8Rng, store: &mut ParamStore) -> TransformerBlock {
        let dims = BlockDims {
            dim: 8,
            heads: 2,
            ff_mult: 2,
            out_gain: 1.0,
        };
        TransformerBlock::new(store, "b", Block::Temporal, dims, false, rng)
    }

    #[test]
    fn unpositioned_self_attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let b = block(&mut rng, &mut store);
        let x = Matrix::from_fn(6, 8, |i, j| ((i * 13 + j * 5) % 7) as f64 * 0.3 - 1.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = Matrix::from_fn(6, 8, |i, j| x.get(perm[i], j));
        let t = Tape::new(BlockSet::empty());
        let y = b.forward_self(&t, &store, t.constant(x), None);
        let yp = b.forward_self(&t, &store, t.constant(xp), None);
        let y = t.value(y).clone();
        let yp = t.value(yp).clone();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((yp.get(i, j) - y.get(p, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_positions_do_not_influence_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", Block::Decoder, 8, 2, 1.0, &mut rng);
        let q = Matrix::from_fn(2, 8, |i, j| (i + j) as f64 * 0.1);
        let mut mem = Matrix::from_fn(4, 8, |i, j| (i * j) as f64 * 0.05);
        let mut mask = Matrix::zeros(2, 4);
        mask.set(0, 3, MASKED_LOGIT);
        mask.set(1, 3, MASKED_LOGIT);
        let t = Tape::default();
        let a = attn.forward(&t, &store, t.constant(q.clone()), t.constant(mem.clone()), Some(&mask));
        mem.row_mut(3).iter_mut().for_each(|v| *v += 100.0);
        let b = attn.forward(&t, &store, t.constant(q), t.constant(mem), Some(&mask));
        assert!(t.value(a).max_abs_diff(&t.value(b)) < 1e-12);
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", Block::Tokenizer, (3, 2), 3, 1.0, &mut rng);
        let x = Matrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * 0.7 + j as f64 * 0.3);
        let t = Tape::default();
        let y = conv.forward(&t, &store, t.constant(x.clone()));
        let y = t.value(y).clone();
        let bias = store.value(conv.taps[1].bias.unwrap());
        for i in 0..5 {
            for o in 0..2 {
                let mut acc = bias.get(0, o);
                for j in 0..3 {
                    let src = i as isize + j as isize - 1;
                    if (0..5).contains(&src) {
                        let w = store.value(conv.taps[j].weight);
                        acc += (0..3).map(|c| x.get(src as usize, c) * w.get(c, o)).sum::<f64>();
                    }
                }
                assert!((y.get(i, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_and_weighted_mean_rows() {
        let t = Tape::default();
        let x = t.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let s = select_rows(&t, x, &[2, 0]);
        assert_eq!(t.value(s).data(), &[5.0, 6.0, 1.0, 2.0]);
        let m = weighted_mean_rows(&t, x, &[1.0, 0.0, 1.0]);
        assert_eq!(t.value(m).data(), &[3.0, 4.0]);
    }
}
