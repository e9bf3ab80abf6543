//! Minimal tape-based reverse-mode automatic differentiation over dense
//! matrices.
//!
//! Operations are recorded on a [`Tape`] in evaluation order, so the tape
//! index order is a topological order of the computation graph. A backward
//! pass walks the tape once in reverse, visiting every node exactly once.
//!
//! ```
//! use ndi_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let w = tape.leaf(Tensor::scalar(3.0));
//! let y = w * w;
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(w).item(), 6.0);
//! ```
//!
//! The engine is first order only. Quantities that need input gradients
//! inside a differentiable objective (score matching) build those gradients
//! explicitly out of ordinary tape operations.

mod check;
mod tensor;

pub use check::{central_difference_gradient, grad_check};
pub use tensor::Tensor;

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("backward requires a scalar output, got a {rows}x{cols} tensor")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("variable belongs to a different tape")]
    ForeignVariable,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    MulScalarVar(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    SumAll(usize),
    SumCols(usize),
    SumRows(usize),
    LogSumExpCols(usize),
    Columns(usize, usize),
    ConcatCols(Vec<usize>),
    BroadcastCols(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input (parameter or data).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose gradient is never read. Identical to [`Tape::leaf`] on
    /// the tape; the separate name documents intent at call sites.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AutodiffError> {
        if !std::ptr::eq(output.tape, self) {
            return Err(AutodiffError::ForeignVariable);
        }
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if out_shape != (1, 1) {
            return Err(AutodiffError::NonScalarOutput {
                rows: out_shape.0,
                cols: out_shape.1,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::scalar(1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, g.zip_map(val(*b), |g, y| g * y));
            accumulate(grads, *b, g.zip_map(val(*a), |g, x| g * x));
        }
        Op::Div(a, b) => {
            let (x, y) = (val(*a), val(*b));
            accumulate(grads, *a, g.zip_map(y, |g, y| g / y));
            let gb = Tensor::from_vec(
                g.rows(),
                g.cols(),
                g.data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((g, x), y)| -g * x / (y * y))
                    .collect(),
            );
            accumulate(grads, *b, gb);
        }
        Op::AddRow(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, sum_rows(g));
        }
        Op::MulCol(a, b) => {
            // a: r×c, b: r×1
            let (x, col) = (val(*a), val(*b));
            let mut ga = g.clone();
            let mut gb = Tensor::zeros(col.rows(), 1);
            for r in 0..g.rows() {
                let s = col.get(r, 0);
                let mut acc = 0.0;
                for c in 0..g.cols() {
                    let gi = g.get(r, c);
                    ga.set(r, c, gi * s);
                    acc += gi * x.get(r, c);
                }
                gb.set(r, 0, acc);
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::MulScalarVar(a, s) => {
            let sv = val(*s).item();
            accumulate(grads, *a, g.scale(sv));
            let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
            accumulate(grads, *s, Tensor::scalar(dot));
        }
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            accumulate(grads, *a, g.matmul(&y.transpose()));
            accumulate(grads, *b, x.transpose().matmul(g));
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::Neg(a) => accumulate(grads, *a, g.scale(-1.0)),
        Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c)),
        Op::AddConst(a) => accumulate(grads, *a, g.clone()),
        Op::Tanh(a) => {
            let ga = g.zip_map(&node.value, |g, y| g * (1.0 - y * y));
            accumulate(grads, *a, ga);
        }
        Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |g, y| g * y)),
        Op::Ln(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| g / x)),
        Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
        Op::Clamp(a, lo, hi) => {
            let ga = g.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
            accumulate(grads, *a, ga);
        }
        Op::Minimum(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let ga = Tensor::from_vec(
                g.rows(),
                g.cols(),
                g.data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                    .collect(),
            );
            let gb = g.zip_map(&ga, |g, ga| g - ga);
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::SumAll(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, *a, Tensor::filled(r, c, g.item()));
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                let gi = g.get(i, 0);
                for j in 0..c {
                    ga.set(i, j, gi);
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::SumRows(a) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                for j in 0..c {
                    ga.set(i, j, g.get(0, j));
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::LogSumExpCols(a) => {
            let x = val(*a);
            let mut ga = Tensor::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let lse = node.value.get(i, 0);
                let gi = g.get(i, 0);
                for j in 0..x.cols() {
                    ga.set(i, j, gi * (x.get(i, j) - lse).exp());
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Columns(a, start) => {
            let (r, c) = val(*a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                for j in 0..g.cols() {
                    ga.set(i, start + j, g.get(i, j));
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (r, c) = val(p).shape();
                let mut gp = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        gp.set(i, j, g.get(i, offset + j));
                    }
                }
                offset += c;
                accumulate(grads, p, gp);
            }
        }
        Op::BroadcastCols(a) => accumulate(grads, *a, sum_cols(g)),
    }
}

fn sum_rows(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            out.data_mut()[c] += t.get(r, c);
        }
    }
    out
}

fn sum_cols(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), 1);
    for r in 0..t.rows() {
        out.set(r, 0, t.row(r).iter().sum());
    }
    out
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the
    /// output.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

fn assert_same_shape(op: &str, a: (usize, usize), b: (usize, usize)) {
    assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
}

impl<'t> Var<'t> {
    /// The tape this variable was recorded on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_of(self.id).item()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_of(self.id).shape()
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let v = f(&self.tape.value_of(self.id));
        self.tape.push(v, op)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Var<'t> {
        let v = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            f(&a, &b)
        };
        self.tape.push(v, op)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        assert_same_shape("div", self.shape(), other.shape());
        self.binary(other, Op::Div(self.id, other.id), |a, b| a.zip_map(b, |x, y| x / y))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        assert_same_shape("mul", self.shape(), other.shape());
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a.zip_map(b, |x, y| x * y))
    }

    /// `self (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (r, c) = self.shape();
        assert_eq!(row.shape(), (1, c), "add_row: bias shape");
        self.binary(row, Op::AddRow(self.id, row.id), |a, b| {
            let mut out = a.clone();
            for i in 0..r {
                for j in 0..c {
                    out.set(i, j, a.get(i, j) + b.get(0, j));
                }
            }
            out
        })
    }

    /// `self (r×c)` with row `i` scaled by `col[i]` (`col` is r×1).
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let (r, c) = self.shape();
        assert_eq!(col.shape(), (r, 1), "mul_col: column shape");
        self.binary(col, Op::MulCol(self.id, col.id), |a, b| {
            let mut out = a.clone();
            for i in 0..r {
                for j in 0..c {
                    out.set(i, j, a.get(i, j) * b.get(i, 0));
                }
            }
            out
        })
    }

    /// Multiplies every entry by the `1×1` variable `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.shape(), (1, 1), "mul_scalar expects a 1x1 factor");
        self.binary(s, Op::MulScalarVar(self.id, s.id), |a, b| a.scale(b.item()))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a.scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.id), |a| a.map(|x| x + c))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), |a| a.map(f64::ln))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.map(|x| x * x))
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |a| a.map(|x| x.clamp(lo, hi)))
    }

    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        assert_same_shape("minimum", self.shape(), other.shape());
        self.binary(other, Op::Minimum(self.id, other.id), |a, b| a.zip_map(b, f64::min))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.shape().0 * self.shape().1;
        self.sum().scale(1.0 / n as f64)
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id), sum_cols)
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), sum_rows)
    }

    /// Row-wise log-sum-exp: `r×c → r×1`.
    pub fn logsumexp_cols(self) -> Var<'t> {
        self.unary(Op::LogSumExpCols(self.id), |a| {
            let mut out = Tensor::zeros(a.rows(), 1);
            for r in 0..a.rows() {
                out.set(r, 0, logsumexp(a.row(r)));
            }
            out
        })
    }

    /// Columns `start..start+len`.
    pub fn columns(self, start: usize, len: usize) -> Var<'t> {
        let (r, c) = self.shape();
        assert!(start + len <= c, "columns out of range");
        self.unary(Op::Columns(self.id, start), |a| {
            let mut out = Tensor::zeros(r, len);
            for i in 0..r {
                for j in 0..len {
                    out.set(i, j, a.get(i, start + j));
                }
            }
            out
        })
    }

    /// Repeats an `r×1` column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        let (r, c) = self.shape();
        assert_eq!(c, 1, "broadcast_cols expects a column");
        self.unary(Op::BroadcastCols(self.id), |a| {
            let mut out = Tensor::zeros(r, cols);
            for i in 0..r {
                for j in 0..cols {
                    out.set(i, j, a.get(i, 0));
                }
            }
            out
        })
    }

    /// Horizontal concatenation of equal-height blocks.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let r = parts[0].shape().0;
        let total: usize = parts.iter().map(|p| p.shape().1).sum();
        let mut out = Tensor::zeros(r, total);
        let mut offset = 0;
        for p in parts {
            let v = tape.value_of(p.id);
            assert_eq!(v.rows(), r, "concat_cols: row mismatch");
            for i in 0..r {
                for j in 0..v.cols() {
                    out.set(i, offset + j, v.get(i, j));
                }
            }
            offset += v.cols();
        }
        tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        assert_same_shape("add", self.shape(), rhs.shape());
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a.zip_map(b, |x, y| x + y))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        assert_same_shape("sub", self.shape(), rhs.shape());
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a.zip_map(b, |x, y| x - y))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| a.scale(-1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let y = w.square();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).item(), 6.0);
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let unused = tape.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let y = w * w;
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_output_gives_zero_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = c.exp();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).item(), 0.0);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(2, 2));
        let err = tape.backward(w.tanh()).err().unwrap();
        assert_eq!(err, AutodiffError::NonScalarOutput { rows: 2, cols: 2 });
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = (w * w) + w at w = 2 -> dy/dw = 2w + 1 = 5
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(2.0));
        let y = w * w + w;
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).item(), 5.0);
    }
}
