//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Node ids
//! grow monotonically and every operation only consumes earlier nodes, so
//! replaying ids in descending order is a valid topological order for the
//! adjoint pass. A graph supports exactly one call to [`Graph::backward`].
//!
//! Shapes are rank 0 (scalar), rank 1 or rank 2 in row-major order. Only the
//! operations the losses and models need are provided, with the single
//! broadcast being a row-wise bias add.

use std::cell::{Cell, RefCell};
use std::fmt;

use thiserror::Error;

/// Added under the square root of [`Var::l2_norm_rows`] so all-zero rows have a
/// finite derivative.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values, got {got}")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain { op: &'static str, index: usize, value: f64 },
    #[error("{op}: index {index} out of range for axis of size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward: loss must hold a single value, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; build a new forward pass")]
    GraphConsumed,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// A plain value: shape plus row-major data. Carries no gradient state.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 || shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} must have rank <= 2 and positive dimensions"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows of a matrix view; rank 0 and 1 tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Concat { parts: Vec<usize>, axis: usize },
    SelectRows(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    L2NormRows(usize),
    GradReverse(usize, f64),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    /// A leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Gradient of the last backward pass, if `var` required one.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            values: g.clone(),
        })
    }

    /// Propagates adjoints from a one-element `loss` to every reachable node
    /// that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if self.consumed.get() {
            return Err(TensorError::GraphConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[loss.id].value.shape.clone();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            nodes[id].grad = Some(g);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
            accumulate(grads, nodes, a, |da| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv.values[p * n + j];
                        }
                        da[i * k + p] += s;
                    }
                }
            });
            accumulate(grads, nodes, b, |db| {
                for i in 0..m {
                    for p in 0..k {
                        let x = av.values[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += x * g[i * n + j];
                        }
                    }
                }
            });
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, |d| add_into(d, g));
            accumulate(grads, nodes, b, |d| add_into(d, g));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |d| add_into(d, g));
            accumulate(grads, nodes, b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        &Op::Mul(a, b) => {
            let av = &nodes[a].value.values;
            let bv = &nodes[b].value.values;
            accumulate(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        &Op::Div(a, b) => {
            let av = &nodes[a].value.values;
            let bv = &nodes[b].value.values;
            accumulate(grads, nodes, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / bv[i];
                }
            });
            accumulate(grads, nodes, b, |d| {
                for i in 0..d.len() {
                    d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        &Op::AddBias(x, b) => {
            accumulate(grads, nodes, x, |d| add_into(d, g));
            let cols = nodes[b].value.numel();
            accumulate(grads, nodes, b, |d| {
                for (i, gi) in g.iter().enumerate() {
                    d[i % cols] += gi;
                }
            });
        }
        &Op::Scale(x, c) => accumulate(grads, nodes, x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
        &Op::AddScalar(x) | &Op::Reshape(x) => accumulate(grads, nodes, x, |d| add_into(d, g)),
        &Op::Relu(x) => {
            let xv = &nodes[x].value.values;
            accumulate(grads, nodes, x, |d| {
                for i in 0..d.len() {
                    if xv[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        &Op::Exp(x) => accumulate(grads, nodes, x, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * out.values[i];
            }
        }),
        &Op::Log(x) => {
            let xv = &nodes[x].value.values;
            accumulate(grads, nodes, x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / xv[i];
                }
            });
        }
        &Op::ClampMin(x, min) => {
            let xv = &nodes[x].value.values;
            accumulate(grads, nodes, x, |d| {
                for i in 0..d.len() {
                    if xv[i] > min {
                        d[i] += g[i];
                    }
                }
            });
        }
        &Op::Sum(x) => accumulate(grads, nodes, x, |d| d.iter_mut().for_each(|d| *d += g[0])),
        &Op::Mean(x) => {
            let n = nodes[x].value.numel() as f64;
            accumulate(grads, nodes, x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
        }
        &Op::SumRows(x) => {
            let cols = nodes[x].value.cols();
            accumulate(grads, nodes, x, |d| {
                for (i, d) in d.iter_mut().enumerate() {
                    *d += g[i / cols];
                }
            });
        }
        Op::Concat { parts, axis } => {
            let out_cols = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pv = &nodes[p].value;
                let (rows, cols) = (pv.rows(), pv.cols());
                accumulate(grads, nodes, p, |d| {
                    if *axis == 0 {
                        add_into(d, &g[offset..offset + pv.numel()]);
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                d[r * cols + c] += g[r * out_cols + offset + c];
                            }
                        }
                    }
                });
                offset += if *axis == 0 { pv.numel() } else { cols };
            }
        }
        Op::SelectRows(x, idx) => {
            let cols = nodes[*x].value.cols();
            accumulate(grads, nodes, *x, |d| {
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d[src * cols + c] += g[r * cols + c];
                    }
                }
            });
        }
        Op::Gather(x, idx) => {
            let cols = nodes[*x].value.cols();
            accumulate(grads, nodes, *x, |d| {
                for (r, &c) in idx.iter().enumerate() {
                    d[r * cols + c] += g[r];
                }
            });
        }
        &Op::Softmax(x) => {
            let cols = out.cols();
            accumulate(grads, nodes, x, |d| {
                for r in 0..out.rows() {
                    let y = &out.values[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..cols {
                        d[r * cols + c] += y[c] * (gr[c] - dot);
                    }
                }
            });
        }
        &Op::LogSoftmax(x) => {
            let cols = out.cols();
            accumulate(grads, nodes, x, |d| {
                for r in 0..out.rows() {
                    let y = &out.values[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        d[r * cols + c] += gr[c] - y[c].exp() * total;
                    }
                }
            });
        }
        &Op::L2NormRows(x) => {
            let xv = &nodes[x].value;
            let cols = xv.cols();
            accumulate(grads, nodes, x, |d| {
                for r in 0..xv.rows() {
                    let scale = g[r] / out.values[r];
                    for c in 0..cols {
                        d[r * cols + c] += scale * xv.values[r * cols + c];
                    }
                }
            });
        }
        &Op::GradReverse(x, lambda) => accumulate(grads, nodes, x, |d| {
            d.iter_mut().zip(g).for_each(|(d, g)| *d -= lambda * g)
        }),
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Applies `f` to this node's value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    /// Gradient after backward; see [`Graph::grad`].
    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn derive(&self, parents: &[usize], value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.needs_grad(parents);
        self.graph.push(value, rg, op)
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'g> {
        let value = self.with_value(f);
        self.derive(&[self.id], value, op)
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn zip_with(&self, other: Var<'g>, op_name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op: op_name,
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let values = a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect();
            Tensor {
                shape: a.shape.clone(),
                values,
            }
        };
        Ok(self.derive(&[self.id, other.id], value, op))
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        self.with_value(|t| {
            if t.shape.len() == 2 {
                Ok((t.shape[0], t.shape[1]))
            } else {
                Err(TensorError::Rank {
                    op,
                    expected: "a matrix",
                    shape: t.shape.clone(),
                })
            }
        })
    }

    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut values = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut values[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = a.values[i * k + p];
                    let brow = &b.values[p * n..(p + 1) * n];
                    for (o, &w) in row.iter_mut().zip(brow) {
                        *o += x * w;
                    }
                }
            }
            Tensor {
                shape: vec![m, n],
                values,
            }
        };
        Ok(self.derive(&[self.id, other.id], value, Op::MatMul(self.id, other.id)))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Elementwise quotient.
    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_with(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(*self).expect("same shape")
    }

    /// Adds a length-`d` bias to every row of an `[n×d]` matrix.
    pub fn add_bias(&self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&bias);
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            if x.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != x.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    left: x.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let cols = x.shape[1];
            let values = x
                .values
                .iter()
                .enumerate()
                .map(|(i, v)| v + b.values[i % cols])
                .collect();
            Tensor {
                shape: x.shape.clone(),
                values,
            }
        };
        Ok(self.derive(&[self.id, bias.id], value, Op::AddBias(self.id, bias.id)))
    }

    pub fn scalar_mul(&self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |t| map(t, |v| v * c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |t| map(t, |v| v + c))
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |t| map(t, |v| v.max(0.0)))
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), |t| map(t, f64::exp))
    }

    /// Natural logarithm, defined only for strictly positive inputs.
    pub fn log(&self) -> Result<Var<'g>> {
        let bad = self.with_value(|t| t.values.iter().position(|v| !(*v > 0.0)).map(|i| (i, t.values[i])));
        if let Some((index, value)) = bad {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(Op::Log(self.id), |t| map(t, f64::ln)))
    }

    /// `max(x, min)`; values at or below `min` pass no gradient.
    pub fn clamp_min(&self, min: f64) -> Var<'g> {
        self.unary(Op::ClampMin(self.id, min), |t| map(t, |v| v.max(min)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'g> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.values.iter().sum()))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Var<'g> {
        self.unary(Op::Mean(self.id), |t| {
            Tensor::scalar(t.values.iter().sum::<f64>() / t.numel() as f64)
        })
    }

    /// `[n×c] → [n]` row sums.
    pub fn sum_rows(&self) -> Result<Var<'g>> {
        let (rows, cols) = self.require_matrix("sum_rows")?;
        Ok(self.unary(Op::SumRows(self.id), |t| Tensor {
            shape: vec![rows],
            values: (0..rows)
                .map(|r| t.values[r * cols..(r + 1) * cols].iter().sum())
                .collect(),
        }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'g>> {
        let value = self.with_value(|t| Tensor::new(shape, t.values.clone()))?;
        Ok(self.derive(&[self.id], value, Op::Reshape(self.id)))
    }

    /// Rows of `self` at `indices` (elements, for a vector). Indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Var<'g>> {
        let value = self.with_value(|t| {
            if t.shape.is_empty() {
                return Err(TensorError::Rank {
                    op: "select_rows",
                    expected: "a vector or matrix",
                    shape: vec![],
                });
            }
            if indices.is_empty() {
                return Err(TensorError::Invalid("select_rows: no indices".into()));
            }
            let (rows, cols) = (t.shape[0], t.cols());
            let mut values = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= rows {
                    return Err(TensorError::Index {
                        op: "select_rows",
                        index: i,
                        size: rows,
                    });
                }
                values.extend_from_slice(&t.values[i * cols..(i + 1) * cols]);
            }
            let mut shape = t.shape.clone();
            shape[0] = indices.len();
            Ok(Tensor { shape, values })
        })?;
        Ok(self.derive(&[self.id], value, Op::SelectRows(self.id, indices.to_vec())))
    }

    /// Contiguous rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(&idx)
    }

    /// `out[i] = self[i, columns[i]]` for an `[n×c]` matrix.
    pub fn gather(&self, columns: &[usize]) -> Result<Var<'g>> {
        let (rows, cols) = self.require_matrix("gather")?;
        if columns.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                left: vec![rows, cols],
                right: vec![columns.len()],
            });
        }
        if let Some(&bad) = columns.iter().find(|&&c| c >= cols) {
            return Err(TensorError::Index {
                op: "gather",
                index: bad,
                size: cols,
            });
        }
        Ok(self.unary(Op::Gather(self.id, columns.to_vec()), |t| Tensor {
            shape: vec![rows],
            values: columns
                .iter()
                .enumerate()
                .map(|(r, &c)| t.values[r * cols + c])
                .collect(),
        }))
    }

    /// Row-wise softmax (a vector is a single row), shifted by the row max.
    pub fn softmax(&self) -> Var<'g> {
        self.unary(Op::Softmax(self.id), |t| {
            let cols = t.cols();
            let mut values = Vec::with_capacity(t.numel());
            for r in 0..t.rows() {
                values.extend(softmax_row(&t.values[r * cols..(r + 1) * cols]));
            }
            Tensor {
                shape: t.shape.clone(),
                values,
            }
        })
    }

    /// Row-wise log-softmax via log-sum-exp with the max shift.
    pub fn log_softmax(&self) -> Var<'g> {
        self.unary(Op::LogSoftmax(self.id), |t| {
            let cols = t.cols();
            let mut values = Vec::with_capacity(t.numel());
            for r in 0..t.rows() {
                values.extend(log_softmax_row(&t.values[r * cols..(r + 1) * cols]));
            }
            Tensor {
                shape: t.shape.clone(),
                values,
            }
        })
    }

    /// `[n×d] → [n]` Euclidean row norms, `sqrt(Σx² + NORM_EPS)`.
    pub fn l2_norm_rows(&self) -> Result<Var<'g>> {
        let (rows, cols) = self.require_matrix("l2_norm_rows")?;
        Ok(self.unary(Op::L2NormRows(self.id), |t| Tensor {
            shape: vec![rows],
            values: (0..rows)
                .map(|r| guarded_norm(&t.values[r * cols..(r + 1) * cols]))
                .collect(),
        }))
    }

    /// Identity forward; the backward pass multiplies the adjoint by `-lambda`.
    pub fn grad_reverse(&self, lambda: f64) -> Var<'g> {
        self.unary(Op::GradReverse(self.id, lambda), Tensor::clone)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    /// Concatenates vectors (axis 0) or matrices along `axis`.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat: no inputs".into()))?;
        let graph = first.graph;
        let value = {
            let nodes = graph.nodes.borrow();
            let shapes: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            let s0 = shapes[0].shape.clone();
            let rank = s0.len();
            if rank == 0 || axis >= rank {
                return Err(TensorError::Rank {
                    op: "concat",
                    expected: "an axis within the tensor rank",
                    shape: s0,
                });
            }
            for t in &shapes[1..] {
                let ok = t.shape.len() == rank && (0..rank).all(|d| d == axis || t.shape[d] == s0[d]);
                if !ok {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        left: s0,
                        right: t.shape.clone(),
                    });
                }
            }
            let mut shape = s0.clone();
            shape[axis] = shapes.iter().map(|t| t.shape[axis]).sum();
            let mut values = Vec::with_capacity(shape.iter().product());
            if axis == 0 {
                for t in &shapes {
                    values.extend_from_slice(&t.values);
                }
            } else {
                for r in 0..s0[0] {
                    for t in &shapes {
                        values.extend_from_slice(t.row(r));
                    }
                }
            }
            Tensor { shape, values }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.derive(
            &ids,
            value,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
        ))
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        values: t.values.iter().map(|&v| f(v)).collect(),
    }
}

/// `sqrt(Σx² + NORM_EPS)`.
pub fn guarded_norm(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let g = Graph::new();
        let i = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = g.constant(m(&[&[3.0, 4.0], &[5.0, 6.0]]));
        assert_eq!(i.matmul(b).unwrap().value().values(), &[3.0, 4.0, 5.0, 6.0]);
        let a = g.constant(m(&[&[1.0, 2.0]]));
        let c = g.constant(m(&[&[3.0], &[4.0]]));
        let out = a.matmul(c).unwrap().value();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.item(), 11.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] and [2, 3]"));
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(x.relu().value().values(), &[0.0, 0.0, 2.0]);
        let y = g.constant(Tensor::vector(vec![2.0, 4.0, 6.0]).unwrap());
        let mean = y.mean().value();
        assert!(mean.shape().is_empty());
        assert_eq!(mean.item(), 4.0);
        let a = g.constant(Tensor::zeros(vec![1, 2]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1, 3]).unwrap());
        assert_eq!(Var::concat(&[a, b], 1).unwrap().shape(), vec![1, 5]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(x.log(), Err(TensorError::Domain { index: 1, .. })));
        let y = g.constant(Tensor::vector(vec![1.0, -2.0]).unwrap());
        assert!(matches!(y.log(), Err(TensorError::Domain { index: 1, .. })));
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
        for v in x.softmax().value().values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let base = m(&[&[0.3, -1.2, 2.5, 0.0], &[10.0, 9.0, -3.0, 1.0]]);
        let shifted = m(&[&[100.3, 98.8, 102.5, 100.0], &[10.0 - 7.0, 2.0, -10.0, -6.0]]);
        let a = g.constant(base).softmax().value();
        let b = g.constant(shifted).softmax().value();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        for r in 0..2 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let g = Graph::new();
        let x = g.constant(m(&[&[0.5, -2.0, 3.0], &[1e-3, 0.0, -1e-3]]));
        let a = x.log_softmax().value();
        let b = x.softmax().log().unwrap().value();
        for (p, q) in a.values().iter().zip(b.values()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_norm_rows_examples() {
        let g = Graph::new();
        let x = g.constant(m(&[&[3.0, 4.0]]));
        assert!((x.l2_norm_rows().unwrap().value().item() - 5.0).abs() < 1e-12);
        let z = g.param(Tensor::zeros(vec![1, 4]).unwrap());
        let n = z.l2_norm_rows().unwrap();
        assert_eq!(n.value().item(), NORM_EPS.sqrt());
        g.backward(n.sum()).unwrap();
        assert!(z.grad().unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_reverse_examples() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let r = x.grad_reverse(0.5);
        assert_eq!(r.value(), x.value());

        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![4.0, 5.0]).unwrap());
        g.backward(x.grad_reverse(1.0).sum()).unwrap();
        assert_eq!(x.grad().unwrap().values(), &[-1.0, -1.0]);

        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![4.0, 5.0]).unwrap());
        g.backward(x.grad_reverse(0.0).sum()).unwrap();
        assert!(x.grad().unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_contract_errors() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert_eq!(g.backward(x.relu()), Err(TensorError::NotScalar(vec![2])));
        let loss = x.sum();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(TensorError::GraphConsumed));
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]).unwrap());
        // x*x + x → 2x + 1
        let y = x.square().add(x).unwrap().sum();
        g.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().values(), &[7.0]);
    }

    #[test]
    fn sum_of_losses_is_sum_of_backwards() {
        let data = m(&[&[0.2, -0.7, 1.1], &[0.9, 0.4, -0.3]]);
        let run = |which: u8| {
            let g = Graph::new();
            let x = g.param(data.clone());
            let a = x
                .softmax()
                .sum_rows()
                .unwrap()
                .mul(x.l2_norm_rows().unwrap())
                .unwrap()
                .mean();
            let b = x.exp().mean();
            let loss = match which {
                0 => a,
                1 => b,
                _ => a.add(b).unwrap(),
            };
            g.backward(loss).unwrap();
            x.grad().unwrap()
        };
        let (ga, gb, gab) = (run(0), run(1), run(2));
        for i in 0..gab.numel() {
            assert!((ga.values()[i] + gb.values()[i] - gab.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn select_and_gather_scatter_gradients() {
        let g = Graph::new();
        let x = g.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = x.select_rows(&[1, 1, 0]).unwrap();
        assert_eq!(s.value().values(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let picked = s.gather(&[0, 1, 1]).unwrap();
        assert_eq!(picked.value().values(), &[3.0, 4.0, 2.0]);
        g.backward(picked.sum()).unwrap();
        assert_eq!(x.grad().unwrap().values(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
