//! Reverse-mode differentiation over a linear tape.
//!
//! Ops are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep.

use super::tensor::{dropout_mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Merge(Var, Var, Vec<bool>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn cols_of(widths: &[usize], idx: usize) -> (usize, usize) {
    let start: usize = widths[..idx].iter().sum();
    (start, start + widths[idx])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", x.shape(), r.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Scales row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * col {:?}", x.shape(), c.shape()),
            ));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            let k = c.get(i, 0);
            value.row_mut(i).iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).leaky_relu(slope);
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(p) => self.value(*p).cols(),
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
            rows += self.value(*p).rows();
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {} columns", x.cols()),
            ));
        }
        let value = Tensor::from_fn(x.rows(), end - start, |i, j| x.get(i, start + j));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Output row `k` is input row `idx[k]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of {} rows", x.rows()),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::new(idx.len(), x.cols(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Output row `r` is the sum of input rows `k` with `idx[k] == r`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let x = self.value(a);
        if idx.len() != x.rows() {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {} rows", idx.len(), x.rows()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("index {bad} >= {n}"),
            ));
        }
        let mut value = Tensor::zeros(n, x.cols());
        for (k, &r) in idx.iter().enumerate() {
            for (o, v) in value.row_mut(r).iter_mut().zip(x.row(k)) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ScatterAddRows(a, idx.to_vec()), rg))
    }

    /// Softmax of a `k×1` score column within groups `groups[k] < n`.
    pub fn segment_softmax(&mut self, a: Var, groups: &[usize], n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.cols() != 1 || x.rows() != groups.len() {
            return Err(Error::shape(
                "segment_softmax",
                format!("{:?} scores for {} groups", x.shape(), groups.len()),
            ));
        }
        if let Some(&bad) = groups.iter().find(|&&g| g >= n) {
            return Err(Error::shape(
                "segment_softmax",
                format!("group {bad} >= {n}"),
            ));
        }
        let mut max = vec![f64::NEG_INFINITY; n];
        for (k, &g) in groups.iter().enumerate() {
            max[g] = max[g].max(x.data()[k]);
        }
        let mut e: Vec<f64> = groups
            .iter()
            .enumerate()
            .map(|(k, &g)| (x.data()[k] - max[g]).exp())
            .collect();
        let mut total = vec![0.0; n];
        for (k, &g) in groups.iter().enumerate() {
            total[g] += e[k];
        }
        for (k, &g) in groups.iter().enumerate() {
            e[k] /= total[g];
        }
        let value = Tensor::new(groups.len(), 1, e)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SegmentSoftmax(a, groups.to_vec(), n), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / x.len().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Elementwise select: `observed` where `keep` is nonzero, else `fill`.
    pub fn masked_merge(&mut self, keep: &Tensor, observed: Var, fill: Var) -> Result<Var> {
        let (o, f) = (self.value(observed), self.value(fill));
        o.expect_same_shape(f, "masked_merge")?;
        o.expect_same_shape(keep, "masked_merge")?;
        let sel: Vec<bool> = keep.data().iter().map(|&m| m != 0.0).collect();
        let data = sel
            .iter()
            .zip(o.data().iter().zip(f.data()))
            .map(|(&k, (&a, &b))| if k { a } else { b })
            .collect();
        let value = Tensor::new(o.rows(), o.cols(), data)?;
        let rg = self.rg(&[observed, fill]);
        Ok(self.push(value, Op::Merge(observed, fill, sel), rg))
    }

    /// Inverted dropout recorded as a product with a constant keep-mask.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !training || p == 0.0 {
            return Ok(a);
        }
        let [r, c] = self.value(a).shape();
        let mask = self.constant(dropout_mask(r, c, p, seed));
        self.mul(a, mask)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let l = self.value(loss);
        if l.shape() != [1, 1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", l.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul_t(bv)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, av.t_matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                let mut colsum = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (s, v) in colsum.data_mut().iter_mut().zip(g.row(i)) {
                        *s += v;
                    }
                }
                self.accumulate(grads, *row, colsum)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.mul(bv)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, g.mul(av)?)?;
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.nodes[a.0].requires_grad {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let k = cv.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|v| *v *= k);
                    }
                    self.accumulate(grads, *a, ga)?;
                }
                if self.nodes[col.0].requires_grad {
                    let gc = Tensor::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum()
                    });
                    self.accumulate(grads, *col, gc)?;
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let ga = g.zip_map(
                    x,
                    "leaky_relu",
                    |gv, xv| if xv >= 0.0 { gv } else { slope * gv },
                )?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(y, "sigmoid", |gv, s| gv * s * (1.0 - s))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.mul(y)?)?,
            Op::Square(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, "square", |gv, xv| 2.0 * xv * gv)?)?;
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, "abs", |gv, xv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
                for (idx, p) in parts.iter().enumerate() {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    let (s, e) = cols_of(&widths, idx);
                    let gp = Tensor::from_fn(g.rows(), e - s, |i, j| g.get(i, s + j));
                    self.accumulate(grads, *p, gp)?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let [r, c] = self.value(*p).shape();
                    if self.nodes[p.0].requires_grad {
                        let gp = Tensor::new(r, c, g.data()[start * c..(start + r) * c].to_vec())?;
                        self.accumulate(grads, *p, gp)?;
                    }
                    start += r;
                }
            }
            Op::SliceCols(a, start) => {
                let [r, c] = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::GatherRows(a, idx) => {
                let [r, c] = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::ScatterAddRows(a, idx) => {
                let mut data = Vec::with_capacity(idx.len() * g.cols());
                for &r in idx {
                    data.extend_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, Tensor::new(idx.len(), g.cols(), data)?)?;
            }
            Op::SegmentSoftmax(a, groups, n) => {
                let mut dot = vec![0.0; *n];
                for (k, &grp) in groups.iter().enumerate() {
                    dot[grp] += g.data()[k] * y.data()[k];
                }
                let ga = Tensor::from_fn(groups.len(), 1, |k, _| {
                    y.data()[k] * (g.data()[k] - dot[groups[k]])
                });
                self.accumulate(grads, *a, ga)?;
            }
            Op::SoftmaxRows(a) => {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for (o, s) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                        *o = s * (*o - dot);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    let mut probs = y.row(i).to_vec();
                    probs.iter_mut().for_each(|v| *v = v.exp());
                    for (o, p) in ga.row_mut(i).iter_mut().zip(&probs) {
                        *o -= p * total;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                let [r, c] = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data()[0]))?;
            }
            Op::Merge(a, b, sel) => {
                let pick = |keep: bool| {
                    let data = g
                        .data()
                        .iter()
                        .zip(sel)
                        .map(|(&v, &k)| if k == keep { v } else { 0.0 })
                        .collect();
                    Tensor::new(g.rows(), g.cols(), data)
                };
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, pick(true)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, pick(false)?)?;
                }
            }
            Op::Mean(a) => {
                let [r, c] = self.value(*a).shape();
                let k = g.data()[0] / (r * c).max(1) as f64;
                self.accumulate(grads, *a, Tensor::filled(r, c, k))?;
            }
        }
        Ok(())
    }
}
