//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the tape; because a node can only refer
//! to nodes recorded before it, tape order is a topological order and the
//! backward sweep simply walks the tape in reverse, visiting each node once.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;
use crate::tensor::{matmul_raw, Tensor};

/// Logits beyond this magnitude are clamped inside `sigmoid` and `exp`.
pub const CLAMP: f64 = 40.0;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    SpMM(Arc<CsrMatrix<T>>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, T),
    RowSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    SumCols(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    IndexRows(Var, Vec<usize>),
    Cosine(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    PairSum(Var, Var),
    AddRow(Var, Var),
    PairHidden { u: Var, v: Var, bias: Var },
    Dense { x: Var, w: Var, bias: Var, relu: bool },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
///
/// Operations take `&self` so that nested expressions compose naturally;
/// a tape is confined to one thread.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to the tape's leaves.
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` was unreached.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.grads
            .get(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn clamp<T: Scalar>(x: T) -> T {
    let c = T::lit(CLAMP);
    x.max(-c).min(c)
}

fn inside_clamp<T: Scalar>(x: T) -> bool {
    x.abs() <= T::lit(CLAMP)
}

fn cosine_parts<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let d = x.cols();
    let mut unit = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        norms.push(n);
        if n > T::zero() {
            unit.extend(row.iter().map(|&v| v / n));
        } else {
            unit.extend(std::iter::repeat_n(T::zero(), d));
        }
    }
    (Tensor::from_parts(x.rows(), d, unit), norms)
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> (T, Vec<T>) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    let lse = m + s.ln();
    let probs = exps.into_iter().map(|e| e / s).collect();
    (lse, probs)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_raw(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        // Nodes that no gradient can reach are stored as constants.
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, rg))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes without copying.
    pub fn matmul_ex(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = matmul_raw(&self.value(a), ta, &self.value(b), tb)?;
        self.push("matmul", value, Op::MatMul { a, ta, b, tb }, &[a, b])
    }

    /// Sparse constant times a dense variable.
    pub fn spmm(&self, s: &Arc<CsrMatrix<T>>, x: Var) -> Result<Var> {
        let value = s.matmul(&self.value(x))?;
        self.push("spmm", value, Op::SpMM(Arc::clone(s), x), &[x])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(&self.value(b))?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(&self.value(b))?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(&self.value(b))?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).map(|v| v + s);
        self.push("add_scalar", value, Op::AddScalar(a), &[a])
    }

    /// Repeats a `1×n` row `m` times.
    pub fn broadcast_rows(&self, v: Var, m: usize) -> Result<Var> {
        let x = self.value(v);
        if x.rows() != 1 {
            return Err(Error::dim("broadcast_rows", format!("expected a row vector, got {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(m * x.cols());
        for _ in 0..m {
            data.extend_from_slice(x.data());
        }
        self.push("broadcast_rows", Tensor::from_parts(m, x.cols(), data), Op::BroadcastRows(v), &[v])
    }

    /// Repeats an `m×1` column `n` times.
    pub fn broadcast_cols(&self, v: Var, n: usize) -> Result<Var> {
        let x = self.value(v);
        if x.cols() != 1 {
            return Err(Error::dim("broadcast_cols", format!("expected a column vector, got {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(n * x.rows());
        for &e in x.data() {
            data.extend(std::iter::repeat_n(e, n));
        }
        self.push("broadcast_cols", Tensor::from_parts(x.rows(), n, data), Op::BroadcastCols(v), &[v])
    }

    /// `a + 1·bᵀ` for a row vector `b`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        check_bias("add_row", x.cols(), &b)?;
        let mut data = x.into_vec();
        add_bias(&mut data, b.data(), false);
        self.push("add_row", Tensor::from_parts(self.shape(a)[0], b.cols(), data), Op::AddRow(a, row), &[a, row])
    }

    /// `a − 1·bᵀ` for a row vector `b`.
    pub fn sub_row(&self, a: Var, row: Var) -> Result<Var> {
        let m = self.shape(a)[0];
        let b = self.broadcast_rows(row, m)?;
        self.sub(a, b)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if x.len() != rows * cols {
            return Err(Error::dim("reshape", format!("{:?} into {rows}x{cols}", x.shape())));
        }
        let value = Tensor::from_parts(rows, cols, x.into_vec());
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    /// Logistic function, kept strictly inside `(0, 1)`: far from zero the
    /// exact value rounds to 0 or 1, so it is pinned just inside instead.
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let (lo, hi) = (T::min_positive_value(), T::one() - T::epsilon());
        let value = self.value(a).map(|v| (T::one() / (T::one() + (-clamp(v)).exp())).max(lo).min(hi));
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| clamp(v).exp());
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.push("log", x.map(|v| v.ln()), Op::Log(a), &[a])
    }

    /// Elementwise power; the base must be strictly positive.
    pub fn powf(&self, a: Var, p: T) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "powf",
                detail: format!("non-positive base {bad}"),
            });
        }
        self.push("powf", x.map(|v| v.powf(p)), Op::Powf(a, p), &[a])
    }

    pub fn row_softmax(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            out.extend(log_softmax_row(x.row(i)).1);
        }
        self.push("row_softmax", Tensor::from_parts(x.rows(), x.cols(), out), Op::RowSoftmax(a), &[a])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let value = Tensor::scalar(x.sum() / T::lit(x.len() as f64));
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(&self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sq_norm());
        self.push("sq_norm", value, Op::SqNorm(a), &[a])
    }

    /// Row sums as an `m×1` column.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = (0..x.rows()).map(|i| x.row(i).iter().copied().sum()).collect();
        self.push("sum_cols", Tensor::from_parts(x.rows(), 1, data), Op::SumCols(a), &[a])
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        self.push("mean_rows", x.mean_rows(), Op::MeanRows(a), &[a])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = values.first().map_or(0, Tensor::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &values {
            if v.cols() != cols {
                return Err(Error::dim("concat_rows", format!("{} vs {} columns", v.cols(), cols)));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push("concat_rows", Tensor::from_parts(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn index_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(idx)?;
        self.push("index_rows", value, Op::IndexRows(a, idx.to_vec()), &[a])
    }

    /// Pairwise cosine similarities between the rows of `a` and of `b`.
    /// Pairs involving a zero-norm row are defined as 0.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.cols() != xb.cols() {
            return Err(Error::dim("cosine", format!("{} vs {} columns", xa.cols(), xb.cols())));
        }
        let (ua, _) = cosine_parts(&xa);
        let (ub, _) = cosine_parts(&xb);
        let value = matmul_raw(&ua, false, &ub, true)?;
        self.push("cosine", value, Op::Cosine(a, b), &[a, b])
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rows() != labels.len() || x.rows() == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} logit rows for {} labels", x.rows(), labels.len()),
            ));
        }
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= x.cols() {
                return Err(Error::dim("cross_entropy", format!("label {y} with {} classes", x.cols())));
            }
            let row = x.row(i);
            total += log_softmax_row(row).0 - row[y];
        }
        let value = Tensor::scalar(total / T::lit(labels.len() as f64));
        self.push("cross_entropy", value, Op::CrossEntropy(logits, labels.to_vec()), &[logits])
    }

    /// For `u, v` of shape `n×h`, returns the `n²×h` matrix whose row
    /// `i·n + j` is `u_i + v_j`.
    pub fn pair_sum(&self, u: Var, v: Var) -> Result<Var> {
        let (xu, xv) = (self.value(u), self.value(v));
        if xu.shape() != xv.shape() {
            return Err(Error::dim("pair_sum", format!("{:?} vs {:?}", xu.shape(), xv.shape())));
        }
        let (n, h) = (xu.rows(), xu.cols());
        let mut data = Vec::with_capacity(n * n * h);
        for i in 0..n {
            let ui = xu.row(i);
            for j in 0..n {
                data.extend(ui.iter().zip(xv.row(j)).map(|(&a, &b)| a + b));
            }
        }
        self.push("pair_sum", Tensor::from_parts(n * n, h, data), Op::PairSum(u, v), &[u, v])
    }

    /// `relu(u_i + v_j + bias)` as row `i·n + j` of an `n²×h` matrix; the
    /// first layer of an MLP over all ordered pairs, fused to keep a single
    /// `n²×h` buffer.
    pub fn pair_hidden(&self, u: Var, v: Var, bias: Var) -> Result<Var> {
        let (xu, xv, b) = (self.value(u), self.value(v), self.value(bias));
        if xu.shape() != xv.shape() {
            return Err(Error::dim("pair_hidden", format!("{:?} vs {:?}", xu.shape(), xv.shape())));
        }
        check_bias("pair_hidden", xu.cols(), &b)?;
        let (n, h) = (xu.rows(), xu.cols());
        let mut data = Vec::with_capacity(n * n * h);
        for i in 0..n {
            let ui = xu.row(i);
            for j in 0..n {
                data.extend(
                    ui.iter()
                        .zip(xv.row(j))
                        .zip(b.data())
                        .map(|((&a, &c), &d)| (a + c + d).max(T::zero())),
                );
            }
        }
        self.push("pair_hidden", Tensor::from_parts(n * n, h, data), Op::PairHidden { u, v, bias }, &[u, v, bias])
    }

    /// `x·w + bias`, optionally followed by a ReLU, in one buffer.
    pub fn dense(&self, x: Var, w: Var, bias: Var, relu: bool) -> Result<Var> {
        let b = self.value(bias);
        let prod = matmul_raw(&self.value(x), false, &self.value(w), false)?;
        check_bias("dense", prod.cols(), &b)?;
        let [r, c] = prod.shape();
        let mut data = prod.into_vec();
        add_bias(&mut data, b.data(), relu);
        self.push("dense", Tensor::from_parts(r, c, data), Op::Dense { x, w, bias, relu }, &[x, w, bias])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_node = nodes
            .get(root.0)
            .ok_or_else(|| Error::Contract(format!("unknown root {}", root.0)))?;
        if root_node.value.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        let mut out = HashMap::new();
        if !root_node.requires_grad {
            return Ok(Gradients { grads: out });
        }
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, contrib: Tensor<T>| -> Result<()> {
                if !nodes[v.0].requires_grad {
                    return Ok(());
                }
                let slot = &mut grads[v.0];
                *slot = Some(match slot.take() {
                    Some(prev) => prev.add(&contrib)?,
                    None => contrib,
                });
                Ok(())
            };
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;

            match &node.op {
                Op::Leaf => {
                    out.insert(Var(id), g);
                }
                &Op::MatMul { a, ta, b, tb } => {
                    if needs(a) {
                        let ga = if ta {
                            matmul_raw(val(b), tb, &g, true)?
                        } else {
                            matmul_raw(&g, false, val(b), !tb)?
                        };
                        send(a, ga)?;
                    }
                    if needs(b) {
                        let gb = if tb {
                            matmul_raw(&g, true, val(a), ta)?
                        } else {
                            matmul_raw(val(a), !ta, &g, false)?
                        };
                        send(b, gb)?;
                    }
                }
                Op::SpMM(s, x) => send(*x, s.matmul_transposed(&g)?)?,
                &Op::Add(a, b) => {
                    send(a, g.clone())?;
                    send(b, g)?;
                }
                &Op::Sub(a, b) => {
                    send(a, g.clone())?;
                    send(b, g.scale(-T::one()))?;
                }
                &Op::Mul(a, b) => {
                    if needs(a) {
                        send(a, g.hadamard(val(b))?)?;
                    }
                    if needs(b) {
                        send(b, g.hadamard(val(a))?)?;
                    }
                }
                &Op::Scale(a, s) => send(a, g.scale(s))?,
                &Op::AddScalar(a) => send(a, g)?,
                &Op::BroadcastRows(v) => send(v, g.mean_rows().scale(T::lit(g.rows() as f64)))?,
                &Op::BroadcastCols(v) => {
                    let data = (0..g.rows()).map(|i| g.row(i).iter().copied().sum()).collect();
                    send(v, Tensor::from_parts(g.rows(), 1, data))?;
                }
                &Op::Transpose(a) => send(a, g.transpose())?,
                &Op::Reshape(a) => {
                    let [r, c] = val(a).shape();
                    send(a, Tensor::from_parts(r, c, g.into_vec()))?;
                }
                &Op::Relu(a) => send(a, g.zip_map(val(a), "relu", |gv, x| if x > T::zero() { gv } else { T::zero() })?)?,
                &Op::Sigmoid(a) => {
                    let y = &node.value;
                    let x = val(a);
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(x.data())
                        .map(|((&gv, &yv), &xv)| {
                            if inside_clamp(xv) {
                                gv * yv * (T::one() - yv)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    send(a, Tensor::from_parts(g.rows(), g.cols(), data))?;
                }
                &Op::Exp(a) => {
                    let y = &node.value;
                    let x = val(a);
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(x.data())
                        .map(|((&gv, &yv), &xv)| if inside_clamp(xv) { gv * yv } else { T::zero() })
                        .collect();
                    send(a, Tensor::from_parts(g.rows(), g.cols(), data))?;
                }
                &Op::Log(a) => send(a, g.zip_map(val(a), "log", |gv, x| gv / x)?)?,
                &Op::Powf(a, p) => send(a, g.zip_map(val(a), "powf", |gv, x| gv * p * x.powf(p - T::one()))?)?,
                &Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut data = Vec::with_capacity(y.len());
                    for i in 0..y.rows() {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        data.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                    }
                    send(a, Tensor::from_parts(y.rows(), y.cols(), data))?;
                }
                &Op::Sum(a) => {
                    let [r, c] = val(a).shape();
                    send(a, Tensor::full(r, c, g.item()?))?;
                }
                &Op::Mean(a) => {
                    let [r, c] = val(a).shape();
                    send(a, Tensor::full(r, c, g.item()? / T::lit((r * c) as f64)))?;
                }
                &Op::SqNorm(a) => {
                    let s = g.item()? * T::lit(2.0);
                    send(a, val(a).scale(s))?;
                }
                &Op::SumCols(a) => {
                    let x = val(a);
                    let mut data = Vec::with_capacity(x.len());
                    for &gv in g.data() {
                        data.extend(std::iter::repeat_n(gv, x.cols()));
                    }
                    send(a, Tensor::from_parts(x.rows(), x.cols(), data))?;
                }
                &Op::MeanRows(a) => {
                    let x = val(a);
                    let inv = T::one() / T::lit(x.rows() as f64);
                    let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                    let mut data = Vec::with_capacity(x.len());
                    for _ in 0..x.rows() {
                        data.extend_from_slice(&row);
                    }
                    send(a, Tensor::from_parts(x.rows(), x.cols(), data))?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let r = val(p).rows();
                        if needs(p) {
                            let idx: Vec<usize> = (offset..offset + r).collect();
                            send(p, g.select_rows(&idx)?)?;
                        }
                        offset += r;
                    }
                }
                Op::IndexRows(a, idx) => {
                    let x = val(*a);
                    let c = x.cols();
                    let mut data = vec![T::zero(); x.len()];
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, &gv) in data[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *d += gv;
                        }
                    }
                    send(*a, Tensor::from_parts(x.rows(), c, data))?;
                }
                &Op::Cosine(a, b) => {
                    let cos = &node.value;
                    let (ua, na) = cosine_parts(val(a));
                    let (ub, nb) = cosine_parts(val(b));
                    let gc = g.hadamard(cos)?;
                    if needs(a) {
                        let gb_proj = matmul_raw(&g, false, &ub, false)?;
                        let w: Vec<T> = (0..gc.rows()).map(|i| gc.row(i).iter().copied().sum()).collect();
                        send(a, cosine_grad(&gb_proj, &ua, &w, &na))?;
                    }
                    if needs(b) {
                        let ga_proj = matmul_raw(&g, true, &ua, false)?;
                        let mut w = vec![T::zero(); gc.cols()];
                        for i in 0..gc.rows() {
                            for (wj, &v) in w.iter_mut().zip(gc.row(i)) {
                                *wj += v;
                            }
                        }
                        send(b, cosine_grad(&ga_proj, &ub, &w, &nb))?;
                    }
                }
                Op::CrossEntropy(a, labels) => {
                    let x = val(*a);
                    let scale = g.item()? / T::lit(labels.len() as f64);
                    let mut data = Vec::with_capacity(x.len());
                    for (i, &y) in labels.iter().enumerate() {
                        let (_, mut p) = log_softmax_row(x.row(i));
                        p[y] -= T::one();
                        data.extend(p.into_iter().map(|v| v * scale));
                    }
                    send(*a, Tensor::from_parts(x.rows(), x.cols(), data))?;
                }
                &Op::PairSum(u, v) => {
                    let [n, h] = val(u).shape();
                    let mut gu = vec![T::zero(); n * h];
                    let mut gv = vec![T::zero(); n * h];
                    for i in 0..n {
                        for j in 0..n {
                            let r = g.row(i * n + j);
                            for k in 0..h {
                                gu[i * h + k] += r[k];
                                gv[j * h + k] += r[k];
                            }
                        }
                    }
                    send(u, Tensor::from_parts(n, h, gu))?;
                    send(v, Tensor::from_parts(n, h, gv))?;
                }
                &Op::AddRow(a, row) => {
                    if needs(row) {
                        send(row, column_sums(&g))?;
                    }
                    send(a, g)?;
                }
                &Op::PairHidden { u, v, bias } => {
                    let y = &node.value;
                    let [n, h] = val(u).shape();
                    let mut gu = vec![T::zero(); n * h];
                    let mut gv = vec![T::zero(); n * h];
                    let mut gb = vec![T::zero(); h];
                    for i in 0..n {
                        for j in 0..n {
                            let (r, yr) = (g.row(i * n + j), y.row(i * n + j));
                            for k in 0..h {
                                if yr[k] > T::zero() {
                                    gu[i * h + k] += r[k];
                                    gv[j * h + k] += r[k];
                                    gb[k] += r[k];
                                }
                            }
                        }
                    }
                    send(u, Tensor::from_parts(n, h, gu))?;
                    send(v, Tensor::from_parts(n, h, gv))?;
                    send(bias, Tensor::from_parts(1, h, gb))?;
                }
                &Op::Dense { x, w, bias, relu } => {
                    let g = if relu {
                        let y = &node.value;
                        let [r, c] = g.shape();
                        let data = g.into_vec().into_iter().zip(y.data()).map(|(gv, &yv)| if yv > T::zero() { gv } else { T::zero() }).collect();
                        Tensor::from_parts(r, c, data)
                    } else {
                        g
                    };
                    if needs(bias) {
                        send(bias, column_sums(&g))?;
                    }
                    if needs(w) {
                        send(w, matmul_raw(val(x), true, &g, false)?)?;
                    }
                    if needs(x) {
                        send(x, matmul_raw(&g, false, val(w), true)?)?;
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn check_bias<T: Scalar>(op: &'static str, cols: usize, b: &Tensor<T>) -> Result<()> {
    if b.shape() != [1, cols] {
        return Err(Error::dim(op, format!("bias {:?} for {cols} columns", b.shape())));
    }
    Ok(())
}

fn add_bias<T: Scalar>(data: &mut [T], bias: &[T], relu: bool) {
    for row in data.chunks_mut(bias.len().max(1)) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
            if relu && *v < T::zero() {
                *v = T::zero();
            }
        }
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); g.cols()];
    for i in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::from_parts(1, g.cols(), out)
}

/// Row `i` of the result is `(proj_i − w_i·unit_i) / norm_i`, or zero for
/// zero-norm rows.
fn cosine_grad<T: Scalar>(proj: &Tensor<T>, unit: &Tensor<T>, w: &[T], norms: &[T]) -> Tensor<T> {
    let d = unit.cols();
    let mut data = Vec::with_capacity(unit.len());
    for i in 0..unit.rows() {
        if norms[i] > T::zero() {
            let inv = T::one() / norms[i];
            data.extend(
                proj.row(i)
                    .iter()
                    .zip(unit.row(i))
                    .map(|(&p, &u)| (p - w[i] * u) * inv),
            );
        } else {
            data.extend(std::iter::repeat_n(T::zero(), d));
        }
    }
    Tensor::from_parts(unit.rows(), d, data)
}
