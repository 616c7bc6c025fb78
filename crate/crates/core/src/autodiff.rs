//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for backpropagation. A node only
//! carries a gradient when at least one of its inputs does; frozen parameters
//! and constants therefore cost nothing in the backward pass.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::params::{BlockSet, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    MeanRows(Var),
    SumCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RepeatRows(Var),
    NormalizeRows(Var, f64),
    LayerNormRows(Var, f64),
    DynConv(Var, Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    trainable: BlockSet,
    params: RefCell<HashMap<ParamId, Var>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any node, `None` if it did not receive one.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every trainable parameter that was used on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> + '_ {
        self.params
            .iter()
            .filter_map(|(pid, v)| self.wrt(*v).map(|g| (*pid, g)))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(BlockSet::empty())
    }
}

impl Tape {
    /// A tape on which parameters in `trainable` blocks receive gradients.
    pub fn new(trainable: BlockSet) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            trainable,
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.data()[0]
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    /// Loads a parameter onto the tape once; repeated calls reuse the node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let entry = store.entry(id);
        let needs = self.trainable.contains(entry.block);
        let v = self.push(entry.value.clone(), Op::Leaf, needs);
        self.params.borrow_mut().insert(id, v);
        v
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Matrix) -> Matrix) -> Var {
        let value = f(&self.value(a));
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl FnOnce(&Matrix, &Matrix) -> Matrix) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul(a, b), |x, y| x.matmul(y))
    }

    /// `a * b^T`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMulT(a, b), |x, y| x.matmul_t(y))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Op::Transpose(a), Matrix::transpose)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x.zip_map(y, |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x.zip_map(y, |p, q| p - q))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x.zip_map(y, |p, q| p * q))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x.zip_map(y, |p, q| p / q))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, Op::AddRow(a, row), |x, r| {
            assert_eq!((1, x.cols()), r.shape(), "add_row shape mismatch");
            let mut out = x.clone();
            for i in 0..out.rows() {
                for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
            out
        })
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, Op::MulRow(a, row), |x, r| {
            assert_eq!((1, x.cols()), r.shape(), "mul_row shape mismatch");
            let mut out = x.clone();
            for i in 0..out.rows() {
                for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                    *o *= b;
                }
            }
            out
        })
    }

    /// Scales row `i` of `a` by entry `i` of a `rows x 1` column.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        self.binary(a, col, Op::MulCol(a, col), |x, c| {
            assert_eq!((x.rows(), 1), c.shape(), "mul_col shape mismatch");
            let mut out = x.clone();
            for i in 0..out.rows() {
                let s = c.data()[i];
                out.row_mut(i).iter_mut().for_each(|o| *o *= s);
            }
            out
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x.scale(s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x.map(|v| v + s))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| x.map(sigmoid))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.map(|v| v.max(0.0)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| x.map(gelu))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.map(f64::tanh))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.map(f64::exp))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.map(f64::ln))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x.map(|v| v * v))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, Op::SoftmaxRows(a), softmax_rows)
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        self.unary(a, Op::LogSoftmaxRows(a), |x| {
            let mut out = x.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        })
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::Sum(a), |x| Matrix::from_vec(1, 1, vec![x.sum()]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows, `1 x cols`.
    pub fn mean_rows(&self, a: Var) -> Var {
        self.unary(a, Op::MeanRows(a), |x| {
            let n = x.rows().max(1) as f64;
            x.sum_rows().scale(1.0 / n)
        })
    }

    /// Sum across columns, `rows x 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        self.unary(a, Op::SumCols(a), |x| {
            Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum())
        })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let ms: Vec<&Matrix> = parts.iter().map(|p| &nodes[p.0].value).collect();
            Matrix::concat_rows(&ms)
        };
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            for i in 0..rows {
                let mut off = 0;
                for p in parts {
                    let m = &nodes[p.0].value;
                    assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                    out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
                    off += m.cols();
                }
            }
            out
        };
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, Op::SliceRows(a, start), |x| x.slice_rows(start, len))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, Op::SliceCols(a, start), |x| {
            assert!(start + len <= x.cols(), "column slice out of bounds");
            Matrix::from_fn(x.rows(), len, |i, j| x.get(i, start + j))
        })
    }

    /// Stacks `count` copies of a single-row node.
    pub fn repeat_rows(&self, a: Var, count: usize) -> Var {
        self.unary(a, Op::RepeatRows(a), |x| {
            assert_eq!(x.rows(), 1, "repeat_rows expects a single row");
            Matrix::from_fn(count, x.cols(), |_, j| x.get(0, j))
        })
    }

    /// `x / sqrt(|x|^2 + eps)` per row.
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::NormalizeRows(a, eps), |x| {
            let mut out = x.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                row.iter_mut().for_each(|v| *v /= n);
            }
            out
        })
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::LayerNormRows(a, eps), |x| {
            let mut out = x.clone();
            let n = x.cols() as f64;
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let sd = (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mu) / sd);
            }
            out
        })
    }

    /// Per-column temporal convolution with column-specific kernels.
    ///
    /// `signal` is `L x C`: column `t` is a length-`L` sequence. `kernels` is
    /// `C x w` with odd `w`; row `t` convolves column `t` with zero padding:
    /// `out[i, t] = sum_j kernels[t, j] * signal[i + j - w/2, t]`.
    pub fn dyn_conv(&self, signal: Var, kernels: Var) -> Var {
        self.binary(signal, kernels, Op::DynConv(signal, kernels), |s, k| {
            assert_eq!(s.cols(), k.rows(), "dyn_conv: one kernel per column");
            assert!(k.cols() % 2 == 1, "dyn_conv kernel width must be odd");
            let (l, c) = s.shape();
            let half = (k.cols() / 2) as isize;
            let mut out = Matrix::zeros(l, c);
            for i in 0..l {
                for t in 0..c {
                    let mut acc = 0.0;
                    for j in 0..k.cols() {
                        let src = i as isize + j as isize - half;
                        if src >= 0 && (src as usize) < l {
                            acc += k.get(t, j) * s.get(src as usize, t);
                        }
                    }
                    out.set(i, t, acc);
                }
            }
            out
        })
    }

    /// Backpropagates from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.borrow().iter().map(|(k, v)| (*k, *v)).collect::<Vec<_>>();
        Gradients { nodes: grads, params }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], nodes: &[Node], v: Var, g: Matrix) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.matmul_t(val(*b)));
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, val(*a).t_matmul(g));
            }
        }
        Op::MatMulT(a, b) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.matmul(val(*b)));
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, g.t_matmul(val(*a)));
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(grads, nodes, *a, g.zip_map(val(*b), |p, q| p * q));
            }
            if needs(*b) {
                accumulate(grads, nodes, *b, g.zip_map(val(*a), |p, q| p * q));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if needs(*a) {
                accumulate(grads, nodes, *a, g.zip_map(bv, |p, q| p / q));
            }
            if needs(*b) {
                let ga = g.zip_map(y, |p, q| p * q);
                accumulate(grads, nodes, *b, ga.zip_map(bv, |p, q| -p / q));
            }
        }
        Op::AddRow(a, r) => {
            accumulate(grads, nodes, *a, g.clone());
            if needs(*r) {
                accumulate(grads, nodes, *r, g.sum_rows());
            }
        }
        Op::MulRow(a, r) => {
            let rv = val(*r);
            if needs(*a) {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    for (o, s) in ga.row_mut(i).iter_mut().zip(rv.data()) {
                        *o *= s;
                    }
                }
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*r) {
                accumulate(grads, nodes, *r, g.zip_map(val(*a), |p, q| p * q).sum_rows());
            }
        }
        Op::MulCol(a, c) => {
            let cv = val(*c);
            if needs(*a) {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let s = cv.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|o| *o *= s);
                }
                accumulate(grads, nodes, *a, ga);
            }
            if needs(*c) {
                let av = val(*a);
                let gc = Matrix::from_fn(av.rows(), 1, |i, _| {
                    g.row(i).iter().zip(av.row(i)).map(|(p, q)| p * q).sum()
                });
                accumulate(grads, nodes, *c, gc);
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, g.zip_map(y, |p, s| p * s * (1.0 - s))),
        Op::Relu(a) => accumulate(
            grads,
            nodes,
            *a,
            g.zip_map(val(*a), |p, x| if x > 0.0 { p } else { 0.0 }),
        ),
        Op::Gelu(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |p, x| p * gelu_grad(x))),
        Op::Tanh(a) => accumulate(grads, nodes, *a, g.zip_map(y, |p, t| p * (1.0 - t * t))),
        Op::Exp(a) => accumulate(grads, nodes, *a, g.zip_map(y, |p, e| p * e)),
        Op::Log(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |p, x| p / x)),
        Op::Square(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |p, x| 2.0 * p * x)),
        Op::SoftmaxRows(a) => {
            let mut ga = Matrix::zeros(y.rows(), y.cols());
            for i in 0..y.rows() {
                let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum();
                for j in 0..y.cols() {
                    ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LogSoftmaxRows(a) => {
            let mut ga = Matrix::zeros(y.rows(), y.cols());
            for i in 0..y.rows() {
                let gs: f64 = g.row(i).iter().sum();
                for j in 0..y.cols() {
                    ga.set(i, j, g.get(i, j) - y.get(i, j).exp() * gs);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Matrix::filled(r, c, g.data()[0]));
        }
        Op::MeanRows(a) => {
            let (r, c) = val(*a).shape();
            let n = r.max(1) as f64;
            accumulate(grads, nodes, *a, Matrix::from_fn(r, c, |_, j| g.get(0, j) / n));
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let r = val(*p).rows();
                if needs(*p) {
                    accumulate(grads, nodes, *p, g.slice_rows(off, r));
                }
                off += r;
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let (r, c) = val(*p).shape();
                if needs(*p) {
                    let o = off;
                    accumulate(grads, nodes, *p, Matrix::from_fn(r, c, |i, j| g.get(i, o + j)));
                }
                off += c;
            }
        }
        Op::SliceRows(a, start) => {
            let (r, c) = val(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, *a, ga);
        }
        Op::SliceCols(a, start) => {
            let (r, c) = val(*a).shape();
            let mut ga = Matrix::zeros(r, c);
            for i in 0..r {
                ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::RepeatRows(a) => accumulate(grads, nodes, *a, g.sum_rows()),
        Op::NormalizeRows(a, eps) => {
            let x = val(*a);
            let mut ga = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let n = (x.row(i).iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
                let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum();
                for j in 0..x.cols() {
                    ga.set(i, j, (g.get(i, j) - y.get(i, j) * dot) / n);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LayerNormRows(a, eps) => {
            let x = val(*a);
            let n = x.cols() as f64;
            let mut ga = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let mu = x.row(i).iter().sum::<f64>() / n;
                let var = x.row(i).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let sd = (var + eps).sqrt();
                let gm = g.row(i).iter().sum::<f64>() / n;
                let gy = g.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum::<f64>() / n;
                for j in 0..x.cols() {
                    ga.set(i, j, (g.get(i, j) - gm - y.get(i, j) * gy) / sd);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::DynConv(s, k) => {
            let sv = val(*s);
            let kv = val(*k);
            let (l, c) = sv.shape();
            let half = (kv.cols() / 2) as isize;
            let mut gs = Matrix::zeros(l, c);
            let mut gk = Matrix::zeros(kv.rows(), kv.cols());
            for i in 0..l {
                for t in 0..c {
                    let go = g.get(i, t);
                    if go == 0.0 {
                        continue;
                    }
                    for j in 0..kv.cols() {
                        let src = i as isize + j as isize - half;
                        if src >= 0 && (src as usize) < l {
                            let src = src as usize;
                            gs.set(src, t, gs.get(src, t) + go * kv.get(t, j));
                            gk.set(t, j, gk.get(t, j) + go * sv.get(src, t));
                        }
                    }
                }
            }
            if needs(*s) {
                accumulate(grads, nodes, *s, gs);
            }
            if needs(*k) {
                accumulate(grads, nodes, *k, gk);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}
