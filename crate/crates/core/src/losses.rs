//! Training objectives, built on the tape so every term is differentiable.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::SegmentAnnotation;
use crate::error::{Error, Result};
use crate::nn::select_rows;
use crate::tensor::Matrix;

/// Dice smoothing.
pub const DICE_EPS: f64 = 1e-6;
/// Keeps logarithms finite at saturated probabilities.
const LOG_EPS: f64 = 1e-12;

/// Mean per-snippet cross-entropy of `probs` (`L x (C + 1)`, rows are
/// distributions) against `labels` in `0..=C`, `C` being background.
pub fn loss_classification(t: &Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (l, classes) = t.shape(probs);
    if labels.len() != l {
        return Err(Error::Shape(format!("{} labels for {l} snippets", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {}]",
            classes - 1
        )));
    }
    let onehot = Matrix::from_fn(l, classes, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
    let logp = t.log(t.add_scalar(probs, LOG_EPS));
    let picked = t.sum(t.mul(logp, t.constant(onehot)));
    Ok(t.scale(picked, -1.0 / l as f64))
}

/// Supervision for one mask column.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTarget {
    pub column: usize,
    pub mask: Vec<bool>,
    /// Action columns enter the dice loss; background columns only the
    /// binary cross-entropy.
    pub action: bool,
}

/// Targets for the mask map of a video with `snippets` snippets: every
/// snippet inside a segment of a class accepted by `keep` supervises its
/// column with that segment's extent, and an equal number of evenly spaced
/// background snippets supervise theirs with an empty mask.
pub fn mask_targets(
    annotations: &[SegmentAnnotation],
    keep: impl Fn(usize) -> bool,
    snippets: usize,
) -> Vec<MaskTarget> {
    let segments: Vec<&SegmentAnnotation> = annotations.iter().filter(|a| keep(a.class_id)).collect();
    let mut targets = Vec::new();
    let mut background = Vec::new();
    for col in 0..snippets {
        match segments.iter().find(|s| s.covers(col)) {
            Some(seg) => targets.push(MaskTarget {
                column: col,
                mask: (0..snippets).map(|i| seg.covers(i)).collect(),
                action: true,
            }),
            None if !annotations.iter().any(|a| a.covers(col)) => background.push(col),
            None => {}
        }
    }
    let wanted = targets.len().min(background.len());
    for k in 0..wanted {
        let col = background[k * background.len() / wanted];
        targets.push(MaskTarget {
            column: col,
            mask: vec![false; snippets],
            action: false,
        });
    }
    targets
}

/// `(L_m, L_comp)` for mask map `masks` (`L x L`, column `t` proposed by
/// snippet `t`). Dice averages over action targets, binary cross-entropy
/// over every entry of every target column.
pub fn loss_mask(t: &Tape, masks: Var, targets: &[MaskTarget]) -> Result<(Var, Var)> {
    let (rows, cols) = t.shape(masks);
    for tg in targets {
        if tg.column >= cols || tg.mask.len() != rows {
            return Err(Error::Shape(format!(
                "mask target for column {} of length {} does not fit a {rows}x{cols} map",
                tg.column,
                tg.mask.len()
            )));
        }
    }
    let zero = || t.constant(Matrix::zeros(1, 1));
    if targets.is_empty() {
        return Ok((zero(), zero()));
    }
    let idx: Vec<usize> = targets.iter().map(|tg| tg.column).collect();
    let p = select_rows(t, t.transpose(masks), &idx);
    let g = Matrix::from_fn(targets.len(), rows, |i, j| if targets[i].mask[j] { 1.0 } else { 0.0 });
    let (dice, bce) = mask_terms(t, p, &g, &targets.iter().map(|tg| tg.action).collect::<Vec<_>>());
    Ok((dice.unwrap_or_else(zero), bce))
}

/// Dice over the `action` rows and mean BCE over all entries of `p` against
/// binary `g`, both `n x L`.
fn mask_terms(t: &Tape, p: Var, g: &Matrix, action: &[bool]) -> (Option<Var>, Var) {
    let gv = t.constant(g.clone());
    let n_act = action.iter().filter(|&&a| a).count();
    let dice = (n_act > 0).then(|| {
        let inter = t.sum_cols(t.mul(p, gv));
        let sp = t.sum_cols(p);
        let sg = Matrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum::<f64>());
        let num = t.add_scalar(t.scale(inter, 2.0), DICE_EPS);
        let den = t.add_scalar(t.add(sp, t.constant(sg)), DICE_EPS);
        let per_row = t.add_scalar(t.scale(t.div(num, den), -1.0), 1.0);
        let w = Matrix::from_fn(1, g.rows(), |_, i| if action[i] { 1.0 / n_act as f64 } else { 0.0 });
        t.matmul(t.constant(w), per_row)
    });
    (dice, binary_cross_entropy(t, p, g))
}

/// Mean binary cross-entropy of probabilities `p` against binary `g`.
pub fn binary_cross_entropy(t: &Tape, p: Var, g: &Matrix) -> Var {
    let gv = t.constant(g.clone());
    let inv = t.constant(g.map(|v| 1.0 - v));
    let log_p = t.log(t.add_scalar(p, LOG_EPS));
    let log_q = t.log(t.add_scalar(t.scale(p, -1.0), 1.0 + LOG_EPS));
    let total = t.add(t.mul(gv, log_p), t.mul(inv, log_q));
    t.scale(t.sum(total), -1.0 / g.len() as f64)
}

fn check_nonzero_rows(t: &Tape, v: Var, what: &str) -> Result<()> {
    let m = t.value(v);
    for i in 0..m.rows() {
        if m.row(i).iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidArgument(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// Row-wise cosine similarity of two `C x D` nodes, as `C x 1`.
fn row_cosines(t: &Tape, a: Var, b: Var) -> Var {
    let a = t.normalize_rows(a, 0.0);
    let b = t.normalize_rows(b, 0.0);
    t.sum_cols(t.mul(a, b))
}

/// Token contrastive loss over classes:
/// `-log(e^{cos(z̄, ẑ)} / (e^{cos(z̄, ẑ)} + 2 e^{cos(z, ẑ)}))`, averaged.
pub fn loss_token_contrastive(t: &Tape, prompt: Var, text: Var, video: Var) -> Result<Var> {
    if t.shape(prompt) != t.shape(text) || t.shape(prompt) != t.shape(video) {
        return Err(Error::Shape("token contrastive inputs must share a shape".into()));
    }
    check_nonzero_rows(t, prompt, "prompt embedding")?;
    check_nonzero_rows(t, text, "text embedding")?;
    check_nonzero_rows(t, video, "video embedding")?;
    let pos = row_cosines(t, video, prompt);
    let neg = row_cosines(t, text, prompt);
    let denom = t.add(t.exp(pos), t.scale(t.exp(neg), 2.0));
    let per_class = t.sub(t.log(denom), pos);
    Ok(t.mean(per_class))
}

/// `sum_j (cos(z_bg, z_j) - delta)^2`.
pub fn loss_background(t: &Tape, background: Var, classes: Var, delta: f64) -> Result<Var> {
    if t.shape(background).0 != 1 || t.shape(background).1 != t.shape(classes).1 {
        return Err(Error::Shape("background must be one row of the class dimension".into()));
    }
    check_nonzero_rows(t, background, "background embedding")?;
    check_nonzero_rows(t, classes, "class embedding")?;
    let bg = t.normalize_rows(background, 0.0);
    let cls = t.normalize_rows(classes, 0.0);
    let cos = t.matmul_t(cls, bg);
    Ok(t.sum(t.square(t.add_scalar(cos, -delta))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Meta,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Meta => "meta",
        })
    }
}

/// Loss terms of one step. Terms a stage does not use are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub l_c: f64,
    pub l_m: f64,
    pub l_comp: f64,
    pub l_tok: f64,
    pub l_bg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_m, self.l_comp, self.l_tok, self.l_bg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}
