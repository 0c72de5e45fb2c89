//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every operation appends one node holding its value and (when gradients are
//! being tracked) the rule needed to propagate gradients back to its inputs.
//! The tape is rebuilt for every training step.
//!
//! Broadcasting is limited to two cases: an operand with a single element
//! broadcasts against anything, and an operand whose shape is a suffix of the
//! other operand's shape is repeated along the leading dimensions.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Index marking a zero-filled slot in a gather map.
pub const GATHER_ZERO: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug)]
enum Unary<T> {
    Sigmoid,
    Relu,
    Exp,
    Log,
    LogSigmoid,
    Abs,
    Power(T),
}

enum Op<T> {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary<T>, usize),
    Affine(usize, T),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SliceLast { src: usize, start: usize },
    ConcatLast(Vec<usize>),
    Gather(usize, Rc<Vec<usize>>),
    Softmax(usize),
    LayerNorm(usize, T),
    Sum(usize),
    SumLast(usize),
    Mean(usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Recording of one forward computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    no_grad_depth: Cell<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// While alive, operations on the tape record no backward rules.
pub struct NoGradGuard<'t, T: Scalar> {
    tape: &'t Tape<T>,
}

impl<T: Scalar> Drop for NoGradGuard<'_, T> {
    fn drop(&mut self) {
        self.tape.no_grad_depth.set(self.tape.no_grad_depth.get() - 1);
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    if nb == 1 && (na != 1 || a.len() >= b.len()) {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    // -softplus(-x), stable for both signs
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            no_grad_depth: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enter a scope in which nothing is recorded for backward. Scopes nest.
    pub fn no_grad(&self) -> NoGradGuard<'_, T> {
        self.no_grad_depth.set(self.no_grad_depth.get() + 1);
        NoGradGuard { tape: self }
    }

    pub fn grad_enabled(&self) -> bool {
        self.no_grad_depth.get() == 0
    }

    /// Add an input tensor. `requires_grad` leaves receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let tracked = requires_grad && self.grad_enabled();
        self.push_raw(value, Op::Leaf, tracked)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(<T as Scalar>::from_f64(v)))
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Whether gradients flow into `v` from later operations.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let tracked = self.grad_enabled() && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].tracked)
        };
        let op = if tracked { op } else { Op::Leaf };
        self.push_raw(value, op, tracked)
    }

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "maximum",
            Binary::Min => "minimum",
        };
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(name, x.shape(), y.shape())?;
            let (xd, yd) = (x.data(), y.data());
            let (lx, ly) = (xd.len(), yd.len());
            let n = numel(&shape);
            let data = (0..n)
                .map(|k| {
                    let (u, v) = (xd[k % lx], yd[k % ly]);
                    match kind {
                        Binary::Add => u + v,
                        Binary::Sub => u - v,
                        Binary::Mul => u * v,
                        Binary::Div => u / v,
                        Binary::Max => {
                            if u >= v {
                                u
                            } else {
                                v
                            }
                        }
                        Binary::Min => {
                            if u <= v {
                                u
                            } else {
                                v
                            }
                        }
                    }
                })
                .collect();
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, Op::Binary(kind, a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    fn unary(&self, kind: Unary<T>, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let data = x
                .data()
                .iter()
                .map(|&v| match kind {
                    Unary::Sigmoid => sigmoid(v),
                    Unary::Relu => v.max(T::zero()),
                    Unary::Exp => v.exp(),
                    Unary::Log => v.ln(),
                    Unary::LogSigmoid => log_sigmoid(v),
                    Unary::Abs => v.abs(),
                    Unary::Power(p) => v.powf(p),
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        self.push(value, Op::Unary(kind, a.0), &[a.0])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    /// `log(sigmoid(x))` without the underflow of composing the two.
    pub fn log_sigmoid(&self, a: Var) -> Var {
        self.unary(Unary::LogSigmoid, a)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn power(&self, a: Var, p: f64) -> Var {
        self.unary(Unary::Power(<T as Scalar>::from_f64(p)), a)
    }

    /// `a * mul + add` with constant coefficients.
    pub fn affine(&self, a: Var, mul: f64, add: f64) -> Var {
        let (m, c) = (<T as Scalar>::from_f64(mul), <T as Scalar>::from_f64(add));
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|&v| v * m + c).collect(),
            )
            .expect("same shape")
        };
        self.push(value, Op::Affine(a.0, m), &[a.0])
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (xs, ys) = (x.shape(), y.shape());
            if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: xs.to_vec(),
                    rhs: ys.to_vec(),
                });
            }
            let (m, k, n) = (xs[0], xs[1], ys[1]);
            Tensor::new(vec![m, n], matmul_raw(x.data(), y.data(), m, k, n))?
        };
        Ok(self.push(value, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let s = x.shape();
            if s.len() != 2 {
                return Err(Error::Shape {
                    op: "transpose",
                    lhs: s.to_vec(),
                    rhs: vec![],
                });
            }
            Tensor::new(vec![s[1], s[0]], transpose_raw(x.data(), s[0], s[1]))?
        };
        Ok(self.push(value, Op::Transpose(a.0), &[a.0]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a.0), &[a.0]))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let s = x.shape();
            let w = *s.last().unwrap_or(&1);
            if s.is_empty() || start + len > w {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: s.to_vec(),
                    rhs: vec![start, start + len],
                });
            }
            let rows = x.len() / w;
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&x.data()[r * w + start..r * w + start + len]);
            }
            let mut shape = s.to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, Op::SliceLast { src: a.0, start }, &[a.0]))
    }

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat_last(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape();
            let lead = &first[..first.len().saturating_sub(1)];
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.is_empty() || &s[..s.len() - 1] != lead {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: first.to_vec(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[s.len() - 1];
            }
            let rows = numel(lead);
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let w = *t.shape().last().unwrap();
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::new(shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatLast(ids.clone()), &ids))
    }

    /// `out[k] = a[index[k]]`, or zero where `index[k] == GATHER_ZERO`.
    pub fn gather(&self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.data();
            if numel(shape) != index.len() {
                return Err(Error::Shape {
                    op: "gather",
                    lhs: shape.to_vec(),
                    rhs: vec![index.len()],
                });
            }
            let mut data = Vec::with_capacity(index.len());
            for &i in index.iter() {
                if i == GATHER_ZERO {
                    data.push(T::zero());
                } else if i < x.len() {
                    data.push(x[i]);
                } else {
                    return Err(Error::Shape {
                        op: "gather",
                        lhs: vec![x.len()],
                        rhs: vec![i],
                    });
                }
            }
            Tensor::new(shape.to_vec(), data)?
        };
        Ok(self.push(value, Op::Gather(a.0, index), &[a.0]))
    }

    /// Rows of a `[rows, w]` tensor, in the given order.
    pub fn select_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let w = s[1];
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * w..(r + 1) * w).collect::<Vec<_>>())
            .collect();
        self.gather(a, Rc::new(index), &[rows.len(), w])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let w = *x.shape().last().unwrap_or(&1);
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(w.max(1)) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z = z + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        self.push(value, Op::Softmax(a.0), &[a.0])
    }

    /// Normalize the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let eps = <T as Scalar>::from_f64(eps);
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let w = *x.shape().last().unwrap_or(&1);
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(w.max(1)) {
                let (mean, inv) = row_stats(row, eps);
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        self.push(value, Op::LayerNorm(a.0, eps), &[a.0])
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self
            .nodes
            .borrow()[a.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |s, &v| s + v);
        self.push(Tensor::scalar(total), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let d = nodes[a.0].value.data();
            let total = d.iter().fold(T::zero(), |s, &v| s + v);
            Tensor::scalar(total / <T as Scalar>::from_f64(d.len() as f64))
        };
        self.push(value, Op::Mean(a.0), &[a.0])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let s = x.shape();
            let w = *s.last().unwrap_or(&1);
            let data = x
                .data()
                .chunks(w.max(1))
                .map(|r| r.iter().fold(T::zero(), |s, &v| s + v))
                .collect();
            let shape = s[..s.len().saturating_sub(1)].to_vec();
            Tensor::new(shape, data).expect("row count")
        };
        self.push(value, Op::SumLast(a.0), &[a.0])
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let ls = nodes[loss.0].value.shape();
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = <T as Scalar>::from_f64(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = row
        .iter()
        .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
        / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    target: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[target].tracked {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![T::zero(); nodes[target].value.len()]);
    f(slot);
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (xa, xb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let (la, lb) = (xa.len(), xb.len());
            let kind = *kind;
            accumulate(nodes, grads, *a, |ga| {
                for (k, &gk) in g.iter().enumerate() {
                    let (u, v) = (xa[k % la], xb[k % lb]);
                    let d = match kind {
                        Binary::Add | Binary::Sub => gk,
                        Binary::Mul => gk * v,
                        Binary::Div => gk / v,
                        Binary::Max => {
                            if u >= v {
                                gk
                            } else {
                                T::zero()
                            }
                        }
                        Binary::Min => {
                            if u <= v {
                                gk
                            } else {
                                T::zero()
                            }
                        }
                    };
                    ga[k % la] = ga[k % la] + d;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for (k, &gk) in g.iter().enumerate() {
                    let (u, v) = (xa[k % la], xb[k % lb]);
                    let d = match kind {
                        Binary::Add => gk,
                        Binary::Sub => -gk,
                        Binary::Mul => gk * u,
                        Binary::Div => -gk * u / (v * v),
                        Binary::Max => {
                            if u >= v {
                                T::zero()
                            } else {
                                gk
                            }
                        }
                        Binary::Min => {
                            if u <= v {
                                T::zero()
                            } else {
                                gk
                            }
                        }
                    };
                    gb[k % lb] = gb[k % lb] + d;
                }
            });
        }
        Op::Unary(kind, a) => {
            let x = nodes[*a].value.data();
            let kind = *kind;
            accumulate(nodes, grads, *a, |ga| {
                for k in 0..g.len() {
                    let d = match kind {
                        Unary::Sigmoid => y[k] * (T::one() - y[k]),
                        Unary::Relu => {
                            if x[k] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Exp => y[k],
                        Unary::Log => T::one() / x[k],
                        Unary::LogSigmoid => sigmoid(-x[k]),
                        Unary::Abs => {
                            if x[k] > T::zero() {
                                T::one()
                            } else if x[k] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Power(p) => p * x[k].powf(p - T::one()),
                    };
                    ga[k] = ga[k] + g[k] * d;
                }
            });
        }
        Op::Affine(a, m) => {
            let m = *m;
            accumulate(nodes, grads, *a, |ga| {
                for (o, &gk) in ga.iter_mut().zip(g) {
                    *o = *o + gk * m;
                }
            });
        }
        Op::MatMul(a, b) => {
            let (xa, xb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (xa.shape()[0], xa.shape()[1]);
            let n = xb.shape()[1];
            accumulate(nodes, grads, *a, |ga| {
                let bt = transpose_raw(xb.data(), k, n);
                let d = matmul_raw(g, &bt, m, n, k);
                for (o, v) in ga.iter_mut().zip(d) {
                    *o = *o + v;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                let at = transpose_raw(xa.data(), m, k);
                let d = matmul_raw(&at, g, k, m, n);
                for (o, v) in gb.iter_mut().zip(d) {
                    *o = *o + v;
                }
            });
        }
        Op::Transpose(a) => {
            let s = nodes[*a].value.shape();
            let (r, c) = (s[0], s[1]);
            accumulate(nodes, grads, *a, |ga| {
                let d = transpose_raw(g, c, r);
                for (o, v) in ga.iter_mut().zip(d) {
                    *o = *o + v;
                }
            });
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |ga| {
            for (o, &v) in ga.iter_mut().zip(g) {
                *o = *o + v;
            }
        }),
        Op::SliceLast { src, start } => {
            let w = *nodes[*src].value.shape().last().unwrap();
            let len = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *src, |ga| {
                for (r, chunk) in g.chunks(len).enumerate() {
                    for (j, &v) in chunk.iter().enumerate() {
                        let o = &mut ga[r * w + start + j];
                        *o = *o + v;
                    }
                }
            });
        }
        Op::ConcatLast(parts) => {
            let total = *node.value.shape().last().unwrap();
            let mut offset = 0;
            for &p in parts {
                let w = *nodes[p].value.shape().last().unwrap();
                accumulate(nodes, grads, p, |gp| {
                    for (r, chunk) in gp.chunks_mut(w).enumerate() {
                        for (j, o) in chunk.iter_mut().enumerate() {
                            *o = *o + g[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::Gather(a, index) => accumulate(nodes, grads, *a, |ga| {
            for (&i, &v) in index.iter().zip(g) {
                if i != GATHER_ZERO {
                    ga[i] = ga[i] + v;
                }
            }
        }),
        Op::Softmax(a) => {
            let w = *node.value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |ga| {
                for ((gr, yr), out) in g.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&u, &v)| s + u * v);
                    for j in 0..w {
                        out[j] = out[j] + yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm(a, eps) => {
            let x = nodes[*a].value.data();
            let w = *node.value.shape().last().unwrap_or(&1);
            let n = <T as Scalar>::from_f64(w as f64);
            let eps = *eps;
            accumulate(nodes, grads, *a, |ga| {
                for (r, ((gr, yr), out)) in g
                    .chunks(w)
                    .zip(y.chunks(w))
                    .zip(ga.chunks_mut(w))
                    .enumerate()
                {
                    let (_, inv) = row_stats(&x[r * w..(r + 1) * w], eps);
                    let gm = gr.iter().fold(T::zero(), |s, &v| s + v) / n;
                    let gy = gr.iter().zip(yr).fold(T::zero(), |s, (&u, &v)| s + u * v) / n;
                    for j in 0..w {
                        out[j] = out[j] + inv * (gr[j] - gm - yr[j] * gy);
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |ga| {
            for o in ga.iter_mut() {
                *o = *o + g[0];
            }
        }),
        Op::Mean(a) => {
            let scale = g[0] / <T as Scalar>::from_f64(nodes[*a].value.len() as f64);
            accumulate(nodes, grads, *a, |ga| {
                for o in ga.iter_mut() {
                    *o = *o + scale;
                }
            });
        }
        Op::SumLast(a) => {
            let w = *nodes[*a].value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |ga| {
                for (r, chunk) in ga.chunks_mut(w.max(1)).enumerate() {
                    for o in chunk.iter_mut() {
                        *o = *o + g[r];
                    }
                }
            });
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if nothing flowed there.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
