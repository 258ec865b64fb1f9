//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node whose parents were
//! created earlier, so insertion order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are meant to be
//! rebuilt for every forward pass.
//!
//! Nodes produced by [`Graph::stop_gradient`] never require gradient, so the
//! reverse sweep deposits nothing into anything upstream of them.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowDot(Var, Var),
    NormalizeRows(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    FrobNorm(Var),
    Dot(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Values substituted, in call order, for `stop_gradient` outputs.
    replay: Option<(Vec<Tensor>, usize)>,
}

/// Gradients of a scalar root with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros of its shape when nothing flowed into it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn unit(x: &Tensor) -> bool {
    x.len() == 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `stop_gradient` calls return `values` in order instead
    /// of their inputs, so a re-evaluated function sees the stopped branches
    /// frozen at a previous point.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Self {
            nodes: Vec::new(),
            replay: Some((values, 0)),
        }
    }

    /// Values produced by every `stop_gradient` call so far, in order.
    pub fn stopped_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Identity forward, zero backward.
    ///
    /// On a [`replaying`](Self::replaying) graph the forward value is the next
    /// recorded tensor instead, falling back to the input when the recording
    /// is exhausted or the shapes differ.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = match &mut self.replay {
            Some((values, next)) if *next < values.len() && values[*next].shape() == self.nodes[x.0].value.shape() => {
                *next += 1;
                values[*next - 1].clone()
            }
            _ => self.value(x).clone(),
        };
        self.push(value, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds the row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::dim(
                "add_row",
                format!("row vector of {} for {} columns", bv.len(), n),
            ));
        }
        let mut value = xv.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Column means, `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x).mean_rows();
        let n = t.len();
        let value = t.reshape(vec![1, n]).expect("same length");
        let rg = self.rg(x);
        self.push(value, Op::MeanRows(x), rg)
    }

    /// Per-row inner products, `m×n, m×n → m×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(Error::dim(
                "row_dot",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let m = av.rows();
        let data = (0..m)
            .map(|i| crate::numerics::tensor::dot(av.row(i), bv.row(i)))
            .collect();
        let value = Tensor::matrix(m, 1, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::RowDot(a, b), rg))
    }

    /// Scales every row to unit l2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let nrm = crate::numerics::tensor::norm(xv.row(i));
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "row {i} has zero norm and cannot be normalized"
                )));
            }
            data.extend(xv.row(i).iter().map(|v| v / nrm));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows(x), rg))
    }

    /// Row-wise log-softmax, stabilized by max-subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = xv.row(i);
            let (m, shift) = crate::numerics::tensor::log_sum_exp_parts(row);
            data.extend(row.iter().map(|v| (v - m) - shift));
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Gathers `x[i, idx[i]]` into an `m×1` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if idx.len() != m {
            return Err(Error::dim(
                "pick",
                format!("{} indices for {m} rows", idx.len()),
            ));
        }
        let mut data = Vec::with_capacity(m);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::Contract(format!(
                    "index {j} out of range for {n} columns"
                )));
            }
            data.push(xv.get(i, j));
        }
        let value = Tensor::matrix(m, 1, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Pick(x, idx.to_vec()), rg))
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).frobenius_norm());
        let rg = self.rg(x);
        self.push(value, Op::FrobNorm(x), rg)
    }

    /// Full inner product `Σ a_i b_i` as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).dot(self.value(b))?);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Dot(a, b), rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !unit(rv) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        // Only nodes that require gradient report one.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut deposit = |v: Var, delta: Tensor| -> Result<()> {
            if !self.rg(v) {
                return Ok(());
            }
            let slot = &mut grads[v.0];
            match slot {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                None => {
                    let shape = self.value(v).shape().to_vec();
                    *slot = Some(delta.reshape(shape)?);
                }
            }
            Ok(())
        };

        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    deposit(*a, g.matmul(&bv.transpose())?)?;
                }
                if self.rg(*b) {
                    deposit(*b, av.transpose().matmul(g)?)?;
                }
            }
            Op::Transpose(a) => {
                let av = self.value(*a);
                let gt = g.clone().reshape(vec![av.cols(), av.rows()])?.transpose();
                deposit(*a, gt)?;
            }
            Op::Add(a, b) => {
                deposit(*a, g.clone())?;
                deposit(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                deposit(*a, g.clone())?;
                deposit(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    deposit(*a, g.zip_with(bv, "mul", |x, y| x * y)?)?;
                }
                if self.rg(*b) {
                    deposit(*b, g.zip_with(av, "mul", |x, y| x * y)?)?;
                }
            }
            Op::AddRow(x, b) => {
                deposit(*x, g.clone())?;
                if self.rg(*b) {
                    deposit(*b, g.mean_rows().scale(g.rows() as f64))?;
                }
            }
            Op::Scale(x, s) => deposit(*x, g.scale(*s))?,
            Op::Relu(x) => {
                let xv = self.value(*x);
                deposit(*x, g.zip_with(xv, "relu", |gi, xi| if xi > 0.0 { gi } else { 0.0 })?)?;
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                deposit(*x, g.zip_with(xv, "square", |gi, xi| 2.0 * xi * gi)?)?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                deposit(*x, Tensor::full(&shape, g.item()))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                deposit(*x, Tensor::full(xv.shape(), g.item() / xv.len() as f64))?;
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let inv = 1.0 / m as f64;
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend(g.data().iter().map(|v| v * inv));
                }
                deposit(*x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.cols();
                let scale_rows = |t: &Tensor| -> Result<Tensor> {
                    let data = t
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, v)| v * g.data()[k / n])
                        .collect();
                    Tensor::new(t.shape().to_vec(), data)
                };
                if self.rg(*a) {
                    deposit(*a, scale_rows(bv)?)?;
                }
                if self.rg(*b) {
                    deposit(*b, scale_rows(av)?)?;
                }
            }
            Op::NormalizeRows(x) => {
                // dx = (g - y (y·g)) / ‖x‖ per row
                let (xv, yv) = (self.value(*x), &node.value);
                let (m, n) = (xv.rows(), xv.cols());
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    let nrm = crate::numerics::tensor::norm(xv.row(i));
                    let y = yv.row(i);
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let yg = crate::numerics::tensor::dot(y, gr);
                    data.extend(y.iter().zip(gr).map(|(yj, gj)| (gj - yj * yg) / nrm));
                }
                deposit(*x, Tensor::new(xv.shape().to_vec(), data)?)?;
            }
            Op::LogSoftmax(x) => {
                let yv = &node.value;
                let (m, n) = (yv.rows(), yv.cols());
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let gs: f64 = gr.iter().sum();
                    data.extend(yv.row(i).iter().zip(gr).map(|(y, gj)| gj - y.exp() * gs));
                }
                deposit(*x, Tensor::new(yv.shape().to_vec(), data)?)?;
            }
            Op::Pick(x, idx) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                for (i, &j) in idx.iter().enumerate() {
                    d.data_mut()[i * n + j] = g.data()[i];
                }
                deposit(*x, d)?;
            }
            Op::FrobNorm(x) => {
                let xv = self.value(*x);
                let nrm = node.value.item();
                if nrm == 0.0 {
                    return Err(Error::Degenerate(
                        "gradient of a Frobenius norm at zero".to_string(),
                    ));
                }
                deposit(*x, xv.scale(g.item() / nrm))?;
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    deposit(*a, bv.scale(g.item()).reshape(av.shape().to_vec())?)?;
                }
                if self.rg(*b) {
                    deposit(*b, av.scale(g.item()).reshape(bv.shape().to_vec())?)?;
                }
            }
        }
        Ok(())
    }
}
