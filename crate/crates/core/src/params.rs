//! Named parameter storage, parameter groups and the Adam optimizer.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::tensor::Matrix;

/// The block a parameter belongs to. Freeze/train policies are expressed
/// over blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// Pretrained video backbone weights.
    Backbone,
    /// Residual adapters inside the backbone.
    Adapter,
    /// Temporal transformer producing snippet embeddings.
    Temporal,
    /// Token table and text transformer. Never trained.
    Text,
    /// Visual semantics tokenizer.
    Tokenizer,
    /// Learned prompt vectors: FS placeholders and ablation contexts.
    Prompt,
    /// Background prototype.
    Background,
    /// Support mask decoder and query weighting.
    Decoder,
    /// Query regulation cross-attention.
    Regulation,
    /// Mask localizer head.
    Head,
}

impl Block {
    pub const ALL: [Block; 10] = [
        Block::Backbone,
        Block::Adapter,
        Block::Temporal,
        Block::Text,
        Block::Tokenizer,
        Block::Prompt,
        Block::Background,
        Block::Decoder,
        Block::Regulation,
        Block::Head,
    ];

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        let name = s.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockSet(u16);

impl BlockSet {
    pub const fn empty() -> Self {
        BlockSet(0)
    }

    pub fn all() -> Self {
        Block::ALL.iter().copied().collect()
    }

    pub fn contains(self, b: Block) -> bool {
        self.0 & b.bit() != 0
    }

    pub fn insert(&mut self, b: Block) {
        self.0 |= b.bit();
    }

    pub fn remove(&mut self, b: Block) {
        self.0 &= !b.bit();
    }

    pub fn with(mut self, b: Block) -> Self {
        self.insert(b);
        self
    }

    pub fn without(mut self, b: Block) -> Self {
        self.remove(b);
        self
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Block> {
        Block::ALL.into_iter().filter(move |b| self.contains(*b))
    }
}

impl FromIterator<Block> for BlockSet {
    fn from_iter<I: IntoIterator<Item = Block>>(iter: I) -> Self {
        let mut s = BlockSet::empty();
        for b in iter {
            s.insert(b);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub block: Block,
    pub value: Matrix,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Identity,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian with std `gain / sqrt(fan_in)`, fan-in being the row count.
    FanIn(f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model
    /// construction bug.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        block: Block,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Identity => {
                assert_eq!(rows, cols, "identity init needs a square matrix");
                Matrix::identity(rows)
            }
            Init::Normal(std) => gaussian(rows, cols, std, rng),
            Init::FanIn(gain) => gaussian(rows, cols, gain / (rows as f64).sqrt(), rng),
        };
        self.insert(name.into(), block, value)
    }

    pub fn insert(&mut self, name: String, block: Block, value: Matrix) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, block, value });
        id
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn count_in(&self, blocks: BlockSet) -> usize {
        self.entries
            .iter()
            .filter(|e| blocks.contains(e.block))
            .map(|e| e.value.len())
            .sum()
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<ParamId, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update for every parameter in `grads` whose block is in
    /// `trainable`. Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, trainable: BlockSet) -> f64 {
        let mut updates: Vec<(ParamId, &Matrix)> = grads
            .params()
            .filter(|(id, _)| trainable.contains(store.entry(*id).block))
            .collect();
        updates.sort_by_key(|(id, _)| *id);
        let norm = updates
            .iter()
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in updates {
            let value = store.value_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            for i in 0..g.len() {
                let gi = g.data()[i] * clip;
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                value.data_mut()[i] -= update;
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_set_membership() {
        let s = BlockSet::empty().with(Block::Adapter).with(Block::Head);
        assert!(s.contains(Block::Adapter));
        assert!(!s.contains(Block::Text));
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![Block::Adapter, Block::Head]);
        assert!(BlockSet::all().contains(Block::Regulation));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = store.add("x", Block::Head, 1, 3, Init::Normal(1.0), &mut rng);
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let tape = Tape::new(BlockSet::all());
            let x = tape.param(&store, p);
            let loss = tape.sum(tape.square(tape.add_scalar(x, -2.0)));
            let g = tape.backward(loss);
            opt.step(&mut store, &g, BlockSet::all());
        }
        for v in store.value(p).data() {
            assert!((v - 2.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn frozen_blocks_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let frozen = store.add("t", Block::Text, 2, 2, Init::Normal(1.0), &mut rng);
        let before = store.value(frozen).clone();
        let mut opt = Adam::new(0.1);
        let tape = Tape::new(BlockSet::all());
        let x = tape.param(&store, frozen);
        let loss = tape.sum(tape.square(x));
        let g = tape.backward(loss);
        opt.step(&mut store, &g, BlockSet::all().without(Block::Text));
        assert_eq!(store.value(frozen), &before);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = store.add("w", Block::Head, 2, 2, Init::Normal(1.0), &mut rng);
        let before = store.clone();
        let mut opt = Adam::new(0.0);
        let tape = Tape::new(BlockSet::all());
        let x = tape.param(&store, p);
        let loss = tape.sum(tape.square(x));
        let g = tape.backward(loss);
        opt.step(&mut store, &g, BlockSet::all());
        assert_eq!(store, before);
    }
}
