//! Per-snippet classification against the prototypes and per-snippet
//! temporal mask prediction.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Block, Init, ParamStore};
use crate::tensor::Matrix;

/// Class probabilities, `(C + 1) x L`; the last row is background.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbMap {
    pub probs: Matrix,
    pub tau: f64,
}

impl ClassProbMap {
    /// From the snippet-major `L x (C + 1)` layout the graph produces.
    pub fn from_snippet_major(p: &Matrix, tau: f64) -> Self {
        Self {
            probs: p.transpose(),
            tau,
        }
    }

    /// Foreground classes `C`.
    pub fn num_classes(&self) -> usize {
        self.probs.rows() - 1
    }

    pub fn snippets(&self) -> usize {
        self.probs.cols()
    }

    pub fn get(&self, class: usize, t: usize) -> f64 {
        self.probs.get(class, t)
    }

    /// Most likely foreground class at snippet `t` and its probability.
    pub fn best_foreground(&self, t: usize) -> (usize, f64) {
        (0..self.num_classes())
            .map(|c| (c, self.get(c, t)))
            .fold(
                (0, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            )
    }
}

/// `L x L` masks in `[0, 1]`; column `t` is the mask proposed by snippet `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    pub masks: Matrix,
}

impl MaskMap {
    pub fn snippets(&self) -> usize {
        self.masks.cols()
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        self.masks.column(t)
    }
}

/// `L x (C + 1)` row-stochastic probabilities from cosine similarity to the
/// prototypes at temperature `tau`. Query rows are normalized here; the
/// prototype rows must already be unit length.
pub fn classify_snippets(t: &Tape, features: Var, prototypes: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if t.shape(features).1 != t.shape(prototypes).1 {
        return Err(Error::Shape(format!(
            "feature dim {} differs from prototype dim {}",
            t.shape(features).1,
            t.shape(prototypes).1
        )));
    }
    let q = t.normalize_rows(features, 1e-12);
    let logits = t.scale(t.matmul_t(q, prototypes), 1.0 / tau);
    Ok(t.softmax_rows(logits))
}

/// One dynamic convolution layer: a kernel and a bias per column, predicted
/// from that column's snippet feature.
#[derive(Clone, Debug)]
struct DynamicLayer {
    kernel: Linear,
    bias: Linear,
}

impl DynamicLayer {
    fn new(store: &mut ParamStore, name: &str, dim: usize, width: usize, rng: &mut impl Rng) -> Self {
        let kernel = Linear::new(
            store,
            &format!("{name}.kernel"),
            Block::Head,
            (dim, width),
            Init::FanIn(0.1),
            true,
            rng,
        );
        let centre = kernel.bias.expect("kernel bias");
        store.value_mut(centre).set(0, width / 2, 1.0);
        Self {
            kernel,
            bias: Linear::new(
                store,
                &format!("{name}.bias"),
                Block::Head,
                (dim, 1),
                Init::FanIn(0.1),
                true,
                rng,
            ),
        }
    }

    fn forward(&self, t: &Tape, store: &ParamStore, signal: Var, features: Var) -> Var {
        let k = self.kernel.forward(t, store, features);
        let b = t.transpose(self.bias.forward(t, store, features));
        t.add_row(t.dyn_conv(signal, k), b)
    }
}

/// Mask localizer: a pairwise snippet affinity signal refined by two
/// dynamic convolution layers, then squashed to `(0, 1)`.
#[derive(Clone, Debug)]
pub struct MaskLocalizer {
    anchor: Linear,
    probe: Linear,
    layers: [DynamicLayer; 2],
}

impl MaskLocalizer {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let w = cfg.mask_kernel;
        Self {
            anchor: Linear::new(store, "head.anchor", Block::Head, (d, d), Init::FanIn(1.0), true, rng),
            probe: Linear::new(store, "head.probe", Block::Head, (d, d), Init::FanIn(1.0), true, rng),
            layers: [
                DynamicLayer::new(store, "head.dyn0", d, w, rng),
                DynamicLayer::new(store, "head.dyn1", d, w, rng),
            ],
        }
    }

    /// `L x L` masks, column `t` proposed by snippet `t`.
    pub fn localize_masks(&self, t: &Tape, store: &ParamStore, features: Var) -> Var {
        let d = t.shape(features).1 as f64;
        let a = self.anchor.forward(t, store, features);
        let p = self.probe.forward(t, store, features);
        let signal = t.scale(t.matmul_t(p, a), 1.0 / d.sqrt());
        let h = t.relu(self.layers[0].forward(t, store, signal, features));
        t.sigmoid(self.layers[1].forward(t, store, h, features))
    }

    /// Names of the final layer's parameters.
    pub fn final_layer_params() -> [&'static str; 4] {
        [
            "head.dyn1.kernel.weight",
            "head.dyn1.kernel.bias",
            "head.dyn1.bias.weight",
            "head.dyn1.bias.bias",
        ]
    }
}
