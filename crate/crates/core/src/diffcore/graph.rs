//! Tape-style reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and a record of
//! its inputs. Nodes are only ever appended, so index order is a topological
//! order and [`Graph::backward`] walks the tape from the end.

use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw};
use super::Tensor;
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MeanRows(Var),
    Sum(Var),
    RowSum(Var),
    SqNorm(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    ClampMin(Var, f64),
    Concat(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Batch moments observed by a train-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (divide by `n`) variance used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving update; the running variance tracks the unbiased
    /// batch variance.
    pub fn update(&mut self, m: &BatchMoments) {
        let unbias = m.count as f64 / (m.count as f64 - 1.0);
        let mom = self.momentum;
        for d in 0..self.dim() {
            self.running_mean[d] = (1.0 - mom) * self.running_mean[d] + mom * m.mean[d];
            self.running_var[d] = (1.0 - mom) * self.running_var[d] + mom * m.var[d] * unbias;
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn row_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked (parameter or differentiable input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from gradient computation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(dim_err!(
                "matmul needs matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let (m, k) = row_cols(ta);
        let (k2, n) = row_cols(tb);
        if k != k2 {
            return Err(dim_err!("matmul inner dimensions {k} and {k2} disagree"));
        }
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a row vector `b` (length `d`) to every row of `a [n×d]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let d = ta.cols();
        if tb.len() != d {
            return Err(dim_err!(
                "add_row: row of length {} does not match {} columns",
                tb.len(),
                d
            ));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Column-wise mean of `a [n×d]`, giving a length-`d` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, d) = row_cols(t);
        if n == 0 {
            return Err(dim_err!("mean_rows of an empty matrix"));
        }
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Per-row sums of `a [n×d]`, giving a length-`n` vector.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::RowSum(a), rg)
    }

    /// Squared L2 norm over all elements.
    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SqNorm(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(contract_err!("log of non-positive value {bad}"));
        }
        let out = t.map(f64::ln);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// `max(a, floor)` elementwise; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor));
        let rg = self.rg(a);
        self.push(out, Op::ClampMin(a, floor), rg)
    }

    /// Stacks the rows of all inputs, which must share a column count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let d = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(dim_err!("concat: {} columns vs {d}", t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::matrix(rows, d, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Gathers rows by index (repeats allowed) into `[idx.len() × d]`.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = t.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err!("row index {bad} out of range for {n} rows"));
        }
        let out = t.select_rows(idx);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec()), rg))
    }

    /// Contiguous rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start > end {
            return Err(dim_err!("slice_rows: start {start} after end {end}"));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(a, &idx)
    }

    /// Picks `a[r, idx[r]]` for every row, giving a length-`n` vector.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (n, d) = row_cols(t);
        if idx.len() != n {
            return Err(dim_err!("pick: {} indices for {n} rows", idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(contract_err!("pick: column {bad} out of range for width {d}"));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Pick(a, idx.to_vec()), rg))
    }

    /// Row-wise softmax with max-shifted exponentials.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_rowwise_input(t, "softmax")?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(t.cols()) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise log-softmax via max-shifted log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_rowwise_input(t, "log_softmax")?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(t.cols()) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Train-mode batch normalization of `x [n×d]` with batch statistics.
    ///
    /// Returns the moments so the caller can fold them into running
    /// statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchMoments)> {
        let t = self.value(x);
        let (n, d) = row_cols(t);
        if t.rank() != 2 {
            return Err(dim_err!("batchnorm needs a matrix, got {:?}", t.shape()));
        }
        if n < 2 {
            return Err(contract_err!("train-mode batchnorm needs at least 2 rows, got {n}"));
        }
        self.check_affine(gamma, beta, d)?;
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let moments = BatchMoments {
            mean: mean.clone(),
            var,
            count: n,
        };
        let v = self.push_bn(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, moments))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BnState,
    ) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(dim_err!("batchnorm needs a matrix, got {:?}", t.shape()));
        }
        let d = t.cols();
        if state.dim() != d {
            return Err(dim_err!("batchnorm state has width {}, input {d}", state.dim()));
        }
        self.check_affine(gamma, beta, d)?;
        let inv_std: Vec<f64> = state
            .running_var
            .iter()
            .map(|v| 1.0 / (v + state.eps).sqrt())
            .collect();
        let mean = state.running_mean.clone();
        self.push_bn(x, gamma, beta, &mean, inv_std, false)
    }

    /// Batch normalization that folds train-mode moments into `state`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: Mode,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (v, m) = self.batchnorm_train(x, gamma, beta, state.eps)?;
                state.update(&m);
                Ok(v)
            }
            Mode::Eval => self.batchnorm_eval(x, gamma, beta, state),
        }
    }

    fn check_affine(&self, gamma: Var, beta: Var, d: usize) -> Result<()> {
        let (g, b) = (self.value(gamma).len(), self.value(beta).len());
        if g != d || b != d {
            return Err(dim_err!("batchnorm affine widths {g}/{b} vs input {d}"));
        }
        Ok(())
    }

    fn push_bn(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = row_cols(t);
        let mut xhat = t.clone();
        for row in xhat.data_mut().chunks_mut(d.max(1)) {
            for c in 0..d {
                row[c] = (row[c] - mean[c]) * inv_std[c];
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let xr = xhat.row(r);
            for c in 0..d {
                out.push(g[c] * xr[c] + b[c]);
            }
        }
        let out = Tensor::matrix(n, d, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Back-propagates from a one-element `loss`, leaving `dloss/dnode` on
    /// every node that requires a gradient. Previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.add_assign(&g),
            None => {
                // Gradients keep the value's shape even when produced flat.
                let g = if g.shape() == node.value.shape() {
                    g
                } else {
                    Tensor::new(node.value.shape().to_vec(), g.into_data())
                        .expect("gradient element count matches value")
                };
                node.grad = Some(g);
            }
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = row_cols(self.value(*a));
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    let ga = matmul_a_bt(g.data(), self.value(*b).data(), m, k, n);
                    self.accumulate(*a, Tensor::matrix(m, k, ga).unwrap());
                }
                if self.rg(*b) {
                    let gb = matmul_at_b(self.value(*a).data(), g.data(), m, k, n);
                    self.accumulate(*b, Tensor::matrix(k, n, gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(*a, g.clone());
                if self.rg(*b) {
                    let d = g.cols();
                    let mut gb = vec![0.0; d];
                    for r in 0..g.rows() {
                        for (s, &v) in gb.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(*b, Tensor::new(shape, gb).unwrap());
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(*a, g.map(|v| v * s));
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let (n, d) = row_cols(t);
                let shape = t.shape().to_vec();
                let mut ga = Vec::with_capacity(n * d);
                for _ in 0..n {
                    ga.extend(g.data().iter().map(|v| v / n as f64));
                }
                self.accumulate(*a, Tensor::new(shape, ga).unwrap());
            }
            Op::Sum(a) => {
                let gv = g.item();
                let ga = self.value(*a).map(|_| gv);
                self.accumulate(*a, ga);
            }
            Op::RowSum(a) => {
                let t = self.value(*a);
                let d = t.cols();
                let shape = t.shape().to_vec();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, d))
                    .collect();
                self.accumulate(*a, Tensor::new(shape, ga).unwrap());
            }
            Op::SqNorm(a) => {
                let gv = g.item();
                let ga = self.value(*a).map(|x| 2.0 * x * gv);
                self.accumulate(*a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv / x);
                self.accumulate(*a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(&self.nodes[i].value, |gv, y| gv * y);
                self.accumulate(*a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(*a, ga);
            }
            Op::ClampMin(a, floor) => {
                let f = *floor;
                let ga = g.zip_map(self.value(*a), |gv, x| if x > f { gv } else { 0.0 });
                self.accumulate(*a, ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let shape = self.value(p).shape().to_vec();
                    let slice = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    self.accumulate(p, Tensor::new(shape, slice).unwrap());
                }
            }
            Op::SelectRows(a, idx) => {
                if !self.rg(*a) {
                    return;
                }
                let t = self.value(*a);
                let d = t.cols();
                let mut ga = Tensor::zeros(t.shape());
                let buf = ga.data_mut();
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        buf[src * d + c] += g.data()[r * d + c];
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::Pick(a, idx) => {
                let t = self.value(*a);
                let d = t.cols();
                let mut ga = Tensor::zeros(t.shape());
                let buf = ga.data_mut();
                for (r, &c) in idx.iter().enumerate() {
                    buf[r * d + c] += g.data()[r];
                }
                self.accumulate(*a, ga);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let d = y.cols();
                let mut ga = y.clone();
                for (r, row) in ga.data_mut().chunks_mut(d).enumerate() {
                    let gr = g.row(r);
                    let dot: f64 = gr.iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (c, v) in row.iter_mut().enumerate() {
                        *v *= gr[c] - dot;
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let d = y.cols();
                let mut ga = g.clone();
                for (r, row) in ga.data_mut().chunks_mut(d).enumerate() {
                    let total: f64 = g.row(r).iter().sum();
                    for (c, v) in row.iter_mut().enumerate() {
                        *v -= y.row(r)[c].exp() * total;
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, d) = row_cols(xhat);
                let gam = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        let gv = g.get(r, c);
                        dgamma[c] += gv * xhat.get(r, c);
                        dbeta[c] += gv;
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * d];
                    if *train {
                        // dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        for c in 0..d {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for r in 0..n {
                                let dxh = g.get(r, c) * gam[c];
                                s1 += dxh;
                                s2 += dxh * xhat.get(r, c);
                            }
                            let nf = n as f64;
                            for r in 0..n {
                                let dxh = g.get(r, c) * gam[c];
                                dx[r * d + c] =
                                    inv_std[c] / nf * (nf * dxh - s1 - xhat.get(r, c) * s2);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for c in 0..d {
                                dx[r * d + c] = g.get(r, c) * gam[c] * inv_std[c];
                            }
                        }
                    }
                    self.accumulate(*x, Tensor::matrix(n, d, dx).unwrap());
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(*gamma, Tensor::new(gshape, dgamma).unwrap());
                self.accumulate(*beta, Tensor::new(bshape, dbeta).unwrap());
            }
        }
    }
}

fn check_rowwise_input(t: &Tensor, what: &str) -> Result<()> {
    if t.is_empty() || t.cols() == 0 {
        return Err(dim_err!("{what} of an empty input"));
    }
    if !t.is_finite() {
        return Err(contract_err!("{what} of non-finite logits"));
    }
    Ok(())
}

/// Max-shifted `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
