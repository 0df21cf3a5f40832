//! Tape-based reverse-mode automatic differentiation over [`Array`]s.
//!
//! A [`Tape`] records every operation applied to its [`Tensor`]s. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid reverse-topological traversal. A tape is single-use: after one
//! [`Tape::backward`] it refuses a second sweep until [`Tape::reset`].
//!
//! ```
//! use era_core::autodiff::{Array, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.param(&Array::scalar(3.0));
//! let y = x.mul(&x).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.wrt(&x).item(), 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use super::array::{gemm, Array};
use crate::distributions::truncated_standard_quantile;
use crate::error::{EraError, Result};
use crate::numerics::{normal_cdf, normal_interval_mass, normal_pdf, normal_quantile};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    SubCol(usize, usize),
    MulScalarTensor(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    NormalCdf(usize),
    NormalIcdf(usize),
    NormalMass(usize, usize),
    TruncatedQuantile(usize, usize, Vec<f64>),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize, Option<Vec<bool>>),
    LogSumExpRows(usize),
    SumRows(usize),
    MeanRows(usize),
    SumAll(usize),
    MeanAll(usize),
    MinRows(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    LayerNormRows(usize, Vec<f64>),
    Reshape(usize),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
    generation: u64,
}

/// Records operations for one forward/backward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    generation: u64,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
    generation: u64,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, or `None` when no gradient
    /// reached it (constants, detached values, unrelated nodes).
    pub fn get(&self, t: &Tensor) -> Option<&Array> {
        if t.generation != self.generation {
            return None;
        }
        self.grads.get(t.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros where no gradient flowed.
    pub fn wrt(&self, t: &Tensor) -> Array {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Array::zeros(&self.shapes[t.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
                generation: 0,
            })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node and re-arms the tape. Tensors from before the reset
    /// can no longer be used with it.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = false;
        inner.generation += 1;
    }

    /// Leaf that gradients flow into.
    pub fn param(&self, value: &Array) -> Tensor {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&self, value: Array) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor {
            tape: self.clone(),
            id,
            generation: inner.generation,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        self.check(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(EraError::TapeConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(EraError::NonScalarLoss(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Array::full(&loss_shape, 1.0));
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                backprop_node(nodes, i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            generation: inner.generation,
        })
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &t.tape.inner) {
            return Err(EraError::ForeignTensor);
        }
        if t.generation != self.inner.borrow().generation {
            return Err(EraError::ForeignTensor);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Array>], id: usize, contribution: Array) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(contribution.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Builds a buffer row by row; `f` gets the row index, the row and the output.
fn per_row(data: &[f64], c: usize, cap: usize, mut f: impl FnMut(usize, &[f64], &mut Vec<f64>)) -> Vec<f64> {
    let mut out = Vec::with_capacity(cap);
    if c > 0 {
        for (k, row) in data.chunks(c).enumerate() {
            f(k, row, &mut out);
        }
    }
    out
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn backprop_node(nodes: &[Node], i: usize, g: &Array, grads: &mut [Option<Array>]) {
    let out = &nodes[i].value;
    let val = |id: usize| &nodes[id].value;
    let wants = |id: usize| nodes[id].requires_grad;
    let gd = g.data();
    let like = |id: usize, data: Vec<f64>| Array::with_data(nodes[id].value.shape(), data);

    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, like(*a, gd.to_vec()));
            }
            if wants(*b) {
                accumulate(grads, *b, like(*b, gd.to_vec()));
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, like(*a, gd.to_vec()));
            }
            if wants(*b) {
                accumulate(grads, *b, like(*b, gd.iter().map(|x| -x).collect()));
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, like(*a, zip_map(gd, val(*b).data(), |g, y| g * y)));
            }
            if wants(*b) {
                accumulate(grads, *b, like(*b, zip_map(gd, val(*a).data(), |g, x| g * x)));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b).data();
            if wants(*a) {
                accumulate(grads, *a, like(*a, zip_map(gd, bv, |g, y| g / y)));
            }
            if wants(*b) {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .zip(bv)
                    .map(|((g, x), y)| -g * x / (y * y))
                    .collect();
                accumulate(grads, *b, like(*b, d));
            }
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                let d = (0..gd.len())
                    .map(|k| if av[k] <= bv[k] { gd[k] } else { 0.0 })
                    .collect();
                accumulate(grads, *a, like(*a, d));
            }
            if wants(*b) {
                let d = (0..gd.len())
                    .map(|k| if av[k] <= bv[k] { 0.0 } else { gd[k] })
                    .collect();
                accumulate(grads, *b, like(*b, d));
            }
        }
        Op::AddRow(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, like(*a, gd.to_vec()));
            }
            if wants(*b) {
                let (_, c) = out.rows_cols();
                let mut d = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (s, x) in d.iter_mut().zip(row) {
                        *s += x;
                    }
                }
                accumulate(grads, *b, like(*b, d));
            }
        }
        Op::MulCol(a, col) => {
            let (_, c) = out.rows_cols();
            let cv = val(*col).data();
            if wants(*a) {
                let d = per_row(gd, c, gd.len(), |k, row, d| d.extend(row.iter().map(|x| x * cv[k])));
                accumulate(grads, *a, like(*a, d));
            }
            if wants(*col) {
                let d = gd
                    .chunks(c)
                    .zip(val(*a).data().chunks(c))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                accumulate(grads, *col, like(*col, d));
            }
        }
        Op::SubCol(a, col) => {
            let (_, c) = out.rows_cols();
            if wants(*a) {
                accumulate(grads, *a, like(*a, gd.to_vec()));
            }
            if wants(*col) {
                let d = gd.chunks(c).map(|r| -r.iter().sum::<f64>()).collect();
                accumulate(grads, *col, like(*col, d));
            }
        }
        Op::MulScalarTensor(a, s) => {
            let sv = val(*s).item();
            if wants(*a) {
                accumulate(grads, *a, like(*a, gd.iter().map(|g| g * sv).collect()));
            }
            if wants(*s) {
                let d: f64 = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                accumulate(grads, *s, like(*s, vec![d]));
            }
        }
        Op::Scale(a, k) => {
            accumulate(grads, *a, like(*a, gd.iter().map(|g| g * k).collect()));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(grads, *a, like(*a, gd.to_vec()));
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).rows_cols();
            let (_, n) = val(*b).rows_cols();
            if wants(*a) {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, gd, false, val(*b).data(), true, &mut d, false);
                accumulate(grads, *a, like(*a, d));
            }
            if wants(*b) {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, val(*a).data(), true, gd, false, &mut d, false);
                accumulate(grads, *b, like(*b, d));
            }
        }
        Op::Tanh(a) => {
            accumulate(grads, *a, like(*a, zip_map(gd, out.data(), |g, y| g * (1.0 - y * y))));
        }
        Op::Relu(a) => {
            let d = zip_map(gd, val(*a).data(), |g, x| if x > 0.0 { g } else { 0.0 });
            accumulate(grads, *a, like(*a, d));
        }
        Op::Exp(a) => {
            accumulate(grads, *a, like(*a, zip_map(gd, out.data(), |g, y| g * y)));
        }
        Op::Log(a) => {
            accumulate(grads, *a, like(*a, zip_map(gd, val(*a).data(), |g, x| g / x)));
        }
        Op::Sqrt(a) => {
            // sqrt(0) passes no gradient instead of an infinite one
            let d = zip_map(gd, out.data(), |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 });
            accumulate(grads, *a, like(*a, d));
        }
        Op::Recip(a) => {
            accumulate(grads, *a, like(*a, zip_map(gd, out.data(), |g, y| -g * y * y)));
        }
        Op::Softplus(a) => {
            let d = zip_map(gd, val(*a).data(), |g, x| g / (1.0 + (-x).exp()));
            accumulate(grads, *a, like(*a, d));
        }
        Op::Clamp(a, lo, hi) => {
            let d = zip_map(gd, val(*a).data(), |g, x| {
                if x >= *lo && x <= *hi {
                    g
                } else {
                    0.0
                }
            });
            accumulate(grads, *a, like(*a, d));
        }
        Op::NormalCdf(a) => {
            let d = zip_map(gd, val(*a).data(), |g, x| g * normal_pdf(x));
            accumulate(grads, *a, like(*a, d));
        }
        Op::NormalIcdf(a) => {
            let d = zip_map(gd, out.data(), |g, y| {
                let p = normal_pdf(y);
                if p > 1e-300 {
                    g / p
                } else {
                    0.0
                }
            });
            accumulate(grads, *a, like(*a, d));
        }
        Op::NormalMass(a, b) => {
            if wants(*a) {
                let d = zip_map(gd, val(*a).data(), |g, x| -g * normal_pdf(x));
                accumulate(grads, *a, like(*a, d));
            }
            if wants(*b) {
                let d = zip_map(gd, val(*b).data(), |g, x| g * normal_pdf(x));
                accumulate(grads, *b, like(*b, d));
            }
        }
        Op::TruncatedQuantile(a, b, eps) => {
            // x = Φ⁻¹(Φ(α) + ε(Φ(β) - Φ(α))), differentiated implicitly
            let (av, bv, xv) = (val(*a).data(), val(*b).data(), out.data());
            let inv_px: Vec<f64> = xv
                .iter()
                .map(|&x| {
                    let p = normal_pdf(x);
                    if p > 1e-300 {
                        1.0 / p
                    } else {
                        0.0
                    }
                })
                .collect();
            if wants(*a) {
                let d = (0..gd.len())
                    .map(|k| gd[k] * (1.0 - eps[k]) * normal_pdf(av[k]) * inv_px[k])
                    .collect();
                accumulate(grads, *a, like(*a, d));
            }
            if wants(*b) {
                let d = (0..gd.len())
                    .map(|k| gd[k] * eps[k] * normal_pdf(bv[k]) * inv_px[k])
                    .collect();
                accumulate(grads, *b, like(*b, d));
            }
        }
        Op::SoftmaxRows(a) => {
            let (_, c) = out.rows_cols();
            let mut d = Vec::with_capacity(gd.len());
            for (gr, yr) in gd.chunks(c).zip(out.data().chunks(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                d.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
            }
            accumulate(grads, *a, like(*a, d));
        }
        Op::LogSoftmaxRows(a, mask) => {
            let (_, c) = out.rows_cols();
            let mut d = Vec::with_capacity(gd.len());
            for (r, (gr, yr)) in gd.chunks(c).zip(out.data().chunks(c)).enumerate() {
                let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
                let total: f64 = (0..c).filter(|&j| keep(j)).map(|j| gr[j]).sum();
                d.extend((0..c).map(|j| {
                    if keep(j) {
                        gr[j] - yr[j].exp() * total
                    } else {
                        0.0
                    }
                }));
            }
            accumulate(grads, *a, like(*a, d));
        }
        Op::LogSumExpRows(a) => {
            let (_, c) = val(*a).rows_cols();
            let mut d = Vec::with_capacity(val(*a).len());
            for (row, (&g, &l)) in val(*a).data().chunks(c).zip(gd.iter().zip(out.data())) {
                d.extend(row.iter().map(|x| g * (x - l).exp()));
            }
            accumulate(grads, *a, like(*a, d));
        }
        Op::SumRows(a) | Op::MeanRows(a) => {
            let (_, c) = val(*a).rows_cols();
            let scale = if matches!(nodes[i].op, Op::MeanRows(_)) {
                1.0 / c as f64
            } else {
                1.0
            };
            let d = per_row(gd, 1, gd.len() * c, |_, g, d| d.resize(d.len() + c, g[0] * scale));
            accumulate(grads, *a, like(*a, d));
        }
        Op::SumAll(a) => {
            let n = val(*a).len();
            accumulate(grads, *a, like(*a, vec![gd[0]; n]));
        }
        Op::MeanAll(a) => {
            let n = val(*a).len();
            accumulate(grads, *a, like(*a, vec![gd[0] / n as f64; n]));
        }
        Op::MinRows(a, idx) | Op::GatherCols(a, idx) => {
            let (_, c) = val(*a).rows_cols();
            let mut d = vec![0.0; val(*a).len()];
            for (r, (&j, &g)) in idx.iter().zip(gd).enumerate() {
                d[r * c + j] += g;
            }
            accumulate(grads, *a, like(*a, d));
        }
        Op::ConcatCols(a, b) => {
            let (_, p) = val(*a).rows_cols();
            let (_, q) = val(*b).rows_cols();
            if wants(*a) {
                let d = per_row(gd, p + q, val(*a).len(), |_, r, d| d.extend_from_slice(&r[..p]));
                accumulate(grads, *a, like(*a, d));
            }
            if wants(*b) {
                let d = per_row(gd, p + q, val(*b).len(), |_, r, d| d.extend_from_slice(&r[p..]));
                accumulate(grads, *b, like(*b, d));
            }
        }
        Op::SliceCols(a, start) => {
            let (r, c) = val(*a).rows_cols();
            let (_, w) = out.rows_cols();
            let mut d = vec![0.0; r * c];
            for (row, gr) in gd.chunks(w).enumerate() {
                d[row * c + start..row * c + start + w].copy_from_slice(gr);
            }
            accumulate(grads, *a, like(*a, d));
        }
        Op::LayerNormRows(a, inv_std) => {
            let (_, c) = out.rows_cols();
            let cf = c as f64;
            let mut d = Vec::with_capacity(gd.len());
            for ((gr, yr), &is) in gd.chunks(c).zip(out.data().chunks(c)).zip(inv_std) {
                let mg = gr.iter().sum::<f64>() / cf;
                let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / cf;
                d.extend(gr.iter().zip(yr).map(|(g, y)| is * (g - mg - y * mgy)));
            }
            accumulate(grads, *a, like(*a, d));
        }
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> EraError {
    EraError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rows_shape(a: &Array) -> Vec<usize> {
    let s = a.shape();
    s[..s.len().saturating_sub(1)].to_vec()
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Array {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// First (or only) element of the value.
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(self)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Tensor {
        self.tape.constant(self.value())
    }

    fn apply(
        &self,
        others: &[&Tensor],
        f: impl FnOnce(&Array, &[&Array]) -> Result<(Array, Op)>,
    ) -> Result<Tensor> {
        self.tape.check(self)?;
        for o in others {
            self.tape.check(o)?;
        }
        let (value, op, requires_grad) = {
            let inner = self.tape.inner.borrow();
            let rest: Vec<&Array> = others.iter().map(|o| &inner.nodes[o.id].value).collect();
            let (value, op) = f(&inner.nodes[self.id].value, &rest)?;
            let rg = inner.nodes[self.id].requires_grad
                || others.iter().any(|o| inner.nodes[o.id].requires_grad);
            (value, op, rg)
        };
        Ok(self.tape.push(value, op, requires_grad))
    }

    fn elementwise(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        let (i, j) = (self.id, other.id);
        self.apply(&[other], |a, rest| {
            let b = rest[0];
            if a.shape() != b.shape() {
                return Err(shape_err(name, a, b));
            }
            Ok((Array::with_data(a.shape(), zip_map(a.data(), b.data(), f)), op(i, j)))
        })
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        self.apply(&[], |a, _| Ok((a.map(f), op)))
            .expect("unary ops cannot fail on a tensor of this tape")
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "div", |x, y| x / y, Op::Div)
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "minimum", f64::min, Op::Minimum)
    }

    /// `[n, m] + [m]`, broadcasting the vector over rows.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (i, j) = (self.id, bias.id);
        self.apply(&[bias], |a, rest| {
            let b = rest[0];
            let (_, c) = a.rows_cols();
            if a.shape().len() != 2 || b.shape() != [c] {
                return Err(shape_err("add_row", a, b));
            }
            let data = per_row(a.data(), c, a.len(), |_, r, d| d.extend(r.iter().zip(b.data()).map(|(x, y)| x + y)));
            Ok((Array::with_data(a.shape(), data), Op::AddRow(i, j)))
        })
    }

    /// `[n, m] * [n]`, scaling each row.
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        let (i, j) = (self.id, col.id);
        self.apply(&[col], |a, rest| {
            let b = rest[0];
            let (r, c) = a.rows_cols();
            if a.shape().len() != 2 || b.shape() != [r] {
                return Err(shape_err("mul_col", a, b));
            }
            let data = per_row(a.data(), c, a.len(), |k, r, d| d.extend(r.iter().map(|x| x * b.data()[k])));
            Ok((Array::with_data(a.shape(), data), Op::MulCol(i, j)))
        })
    }

    /// `[n, m] - [n]`, subtracting a per-row value.
    pub fn sub_col(&self, col: &Tensor) -> Result<Tensor> {
        let (i, j) = (self.id, col.id);
        self.apply(&[col], |a, rest| {
            let b = rest[0];
            let (r, c) = a.rows_cols();
            if a.shape().len() != 2 || b.shape() != [r] {
                return Err(shape_err("sub_col", a, b));
            }
            let data = per_row(a.data(), c, a.len(), |k, r, d| d.extend(r.iter().map(|x| x - b.data()[k])));
            Ok((Array::with_data(a.shape(), data), Op::SubCol(i, j)))
        })
    }

    /// Multiplies every element by a single-element tensor.
    pub fn mul_scalar_tensor(&self, s: &Tensor) -> Result<Tensor> {
        let (i, j) = (self.id, s.id);
        self.apply(&[s], |a, rest| {
            let b = rest[0];
            if b.len() != 1 {
                return Err(shape_err("mul_scalar_tensor", a, b));
            }
            let k = b.item();
            Ok((a.map(|x| x * k), Op::MulScalarTensor(i, j)))
        })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.unary(|x| x * k, Op::Scale(self.id, k))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        self.unary(|x| x + k, Op::AddScalar(self.id))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same shape")
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (i, j) = (self.id, other.id);
        self.apply(&[other], |a, rest| {
            let b = rest[0];
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err("matmul", a, b));
            }
            let (m, k) = a.rows_cols();
            let (_, n) = b.rows_cols();
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
            Ok((Array::with_data(&[m, n], c), Op::MatMul(i, j)))
        })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn recip(&self) -> Tensor {
        self.unary(|x| 1.0 / x, Op::Recip(self.id))
    }

    pub fn softplus(&self) -> Tensor {
        self.unary(crate::numerics::softplus, Op::Softplus(self.id))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    /// Straight-through clip: forward value is `clamp(x, lo, hi)`, gradient
    /// passes as if the clip were the identity.
    pub fn clip_straight_through(&self, lo: f64, hi: f64) -> Tensor {
        let clipped = self.value().map(|x| x.clamp(lo, hi));
        let offset = self.tape.constant(Array::with_data(
            clipped.shape(),
            zip_map(clipped.data(), self.value().data(), |c, x| c - x),
        ));
        self.add(&offset).expect("same shape")
    }

    pub fn normal_cdf(&self) -> Tensor {
        self.unary(normal_cdf, Op::NormalCdf(self.id))
    }

    pub fn normal_icdf(&self) -> Tensor {
        self.unary(normal_quantile, Op::NormalIcdf(self.id))
    }

    /// `Φ(upper) - Φ(lower)` elementwise, computed from the tail that avoids
    /// cancellation.
    pub fn normal_mass(&self, upper: &Tensor) -> Result<Tensor> {
        self.elementwise(upper, "normal_mass", normal_interval_mass, Op::NormalMass)
    }

    /// Standardized truncated-normal quantile on `[self, upper]` at fixed
    /// uniforms `eps`, differentiable in both bounds (reparameterized
    /// truncated sampling).
    pub fn truncated_quantile(&self, upper: &Tensor, eps: &[f64]) -> Result<Tensor> {
        let (i, j) = (self.id, upper.id);
        self.apply(&[upper], |a, rest| {
            let b = rest[0];
            if a.shape() != b.shape() || eps.len() != a.len() {
                return Err(shape_err("truncated_quantile", a, b));
            }
            let data = (0..a.len())
                .map(|k| truncated_standard_quantile(a.data()[k], b.data()[k], eps[k]))
                .collect();
            Ok((
                Array::with_data(a.shape(), data),
                Op::TruncatedQuantile(i, j, eps.to_vec()),
            ))
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self) -> Tensor {
        let id = self.id;
        self.apply(&[], |a, _| {
            let (_, c) = a.rows_cols();
            let data = per_row(a.data(), c, a.len(), |_, r, d| d.extend(crate::numerics::softmax(r)));
            Ok((Array::with_data(a.shape(), data), Op::SoftmaxRows(id)))
        })
        .expect("softmax cannot fail")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&self) -> Tensor {
        self.log_softmax_impl(None).expect("no mask")
    }

    /// Log-softmax over the last axis where only entries with `mask = true`
    /// take part in the normalizer; excluded entries come out as `-∞` and
    /// receive no gradient.
    pub fn masked_log_softmax_rows(&self, mask: Vec<bool>) -> Result<Tensor> {
        self.log_softmax_impl(Some(mask))
    }

    fn log_softmax_impl(&self, mask: Option<Vec<bool>>) -> Result<Tensor> {
        let id = self.id;
        self.apply(&[], |a, _| {
            let (_, c) = a.rows_cols();
            if let Some(m) = &mask {
                if m.len() != a.len() {
                    return Err(EraError::ShapeMismatch {
                        op: "masked_log_softmax_rows",
                        lhs: a.shape().to_vec(),
                        rhs: vec![m.len()],
                    });
                }
            }
            let mut data = Vec::with_capacity(a.len());
            for (r, row) in a.data().chunks(c).enumerate() {
                let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * c + j]);
                let kept: Vec<f64> = (0..c).filter(|&j| keep(j)).map(|j| row[j]).collect();
                let lse = crate::numerics::log_sum_exp_unchecked(&kept);
                data.extend((0..c).map(|j| if keep(j) { row[j] - lse } else { f64::NEG_INFINITY }));
            }
            Ok((Array::with_data(a.shape(), data), Op::LogSoftmaxRows(id, mask)))
        })
    }

    /// `log Σ exp` over the last axis; drops that axis.
    pub fn log_sum_exp_rows(&self) -> Tensor {
        let id = self.id;
        self.apply(&[], |a, _| {
            let (_, c) = a.rows_cols();
            let data = a
                .data()
                .chunks(c)
                .map(crate::numerics::log_sum_exp_unchecked)
                .collect();
            Ok((Array::with_data(&rows_shape(a), data), Op::LogSumExpRows(id)))
        })
        .expect("log_sum_exp cannot fail")
    }

    /// Sum over the last axis.
    pub fn sum_rows(&self) -> Tensor {
        let id = self.id;
        self.apply(&[], |a, _| {
            let (_, c) = a.rows_cols();
            let data = a.data().chunks(c).map(|r| r.iter().sum()).collect();
            Ok((Array::with_data(&rows_shape(a), data), Op::SumRows(id)))
        })
        .expect("sum cannot fail")
    }

    /// Mean over the last axis.
    pub fn mean_rows(&self) -> Tensor {
        let id = self.id;
        self.apply(&[], |a, _| {
            let (_, c) = a.rows_cols();
            let data = a
                .data()
                .chunks(c)
                .map(|r| r.iter().sum::<f64>() / c as f64)
                .collect();
            Ok((Array::with_data(&rows_shape(a), data), Op::MeanRows(id)))
        })
        .expect("mean cannot fail")
    }

    /// Minimum over the last axis; the gradient goes to the first minimizer.
    pub fn min_rows(&self) -> Tensor {
        let id = self.id;
        self.apply(&[], |a, _| {
            let (_, c) = a.rows_cols();
            let mut idx = Vec::new();
            let mut data = Vec::new();
            for row in a.data().chunks(c) {
                let (j, v) = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |(bj, bv), (j, &v)| if v < bv { (j, v) } else { (bj, bv) });
                idx.push(j);
                data.push(v);
            }
            Ok((Array::with_data(&rows_shape(a), data), Op::MinRows(id, idx)))
        })
        .expect("min cannot fail")
    }

    pub fn sum(&self) -> Tensor {
        let id = self.id;
        self.apply(&[], |a, _| Ok((Array::scalar(a.data().iter().sum()), Op::SumAll(id))))
            .expect("sum cannot fail")
    }

    pub fn mean(&self) -> Tensor {
        let id = self.id;
        self.apply(&[], |a, _| {
            let n = a.len() as f64;
            Ok((Array::scalar(a.data().iter().sum::<f64>() / n), Op::MeanAll(id)))
        })
        .expect("mean cannot fail")
    }

    /// Picks `self[r, idx[r]]` for every row.
    pub fn gather_cols(&self, idx: &[usize]) -> Result<Tensor> {
        let id = self.id;
        self.apply(&[], |a, _| {
            let (r, c) = a.rows_cols();
            if a.shape().len() != 2 || idx.len() != r || idx.iter().any(|&j| j >= c) {
                return Err(EraError::ShapeMismatch {
                    op: "gather_cols",
                    lhs: a.shape().to_vec(),
                    rhs: vec![idx.len()],
                });
            }
            let data = idx.iter().enumerate().map(|(i, &j)| a.data()[i * c + j]).collect();
            Ok((Array::with_data(&[r], data), Op::GatherCols(id, idx.to_vec())))
        })
    }

    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (i, j) = (self.id, other.id);
        self.apply(&[other], |a, rest| {
            let b = rest[0];
            let (ra, p) = a.rows_cols();
            let (rb, q) = b.rows_cols();
            if a.shape().len() != 2 || b.shape().len() != 2 || ra != rb {
                return Err(shape_err("concat_cols", a, b));
            }
            let bd = b.data();
            let data = per_row(a.data(), p, a.len() + bd.len(), |k, x, d| {
                d.extend_from_slice(x);
                d.extend_from_slice(&bd[k * q..(k + 1) * q]);
            });
            Ok((Array::with_data(&[ra, p + q], data), Op::ConcatCols(i, j)))
        })
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let id = self.id;
        self.apply(&[], |a, _| {
            let (r, c) = a.rows_cols();
            if a.shape().len() != 2 || start + len > c || len == 0 {
                return Err(EraError::ShapeMismatch {
                    op: "slice_cols",
                    lhs: a.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            let data = per_row(a.data(), c, r * len, |_, row, d| d.extend_from_slice(&row[start..start + len]));
            Ok((Array::with_data(&[r, len], data), Op::SliceCols(id, start)))
        })
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&self) -> Tensor {
        let id = self.id;
        self.apply(&[], |a, _| {
            let (_, c) = a.rows_cols();
            let cf = c as f64;
            let mut inv_std = Vec::new();
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks(c) {
                let m = row.iter().sum::<f64>() / cf;
                let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / cf;
                let is = 1.0 / (v + LAYER_NORM_EPS).sqrt();
                inv_std.push(is);
                data.extend(row.iter().map(|x| (x - m) * is));
            }
            Ok((Array::with_data(a.shape(), data), Op::LayerNormRows(id, inv_std)))
        })
        .expect("layer norm cannot fail")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let id = self.id;
        self.apply(&[], |a, _| Ok((a.clone().reshape(shape.to_vec())?, Op::Reshape(id))))
    }
}
