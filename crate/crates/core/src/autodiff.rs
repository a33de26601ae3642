//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and the handles of its
//! inputs. Nodes are only ever appended, so inputs always precede their
//! consumers and `backward` is a single reverse sweep.
//!
//! Ops work on matrices (`[rows, cols]`, rank-1 treated as one row) except the
//! elementwise family, which accepts any shape. Broadcasting is limited to
//! adding a row-vector bias and scaling rows by a column vector.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Derivative of an elementwise map, given the input `x` and output `y`.
pub type Derivative = fn(f64, f64) -> f64;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Map(Var, Derivative),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MixtureLogSumExp(Var, Vec<Var>),
    WeightedNll(Var, Vec<usize>, Vec<f64>),
    SoftCrossEntropy(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` if nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: non-finite input")))
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise log-softmax via log-sum-exp.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Records a leaf. It participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape checked");
        self.push(value, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x [m×n] + bias [n]` with the bias added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (m, n) = tx.dims2()?;
        if tb.numel() != n {
            return Err(dim_err("add_row", tx, tb));
        }
        let b = tb.data();
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (o, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(x, bias), rg))
    }

    /// `x [m×n]` with row `i` multiplied by `c[i]`, `c` of shape `[m×1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        let (m, n) = tx.dims2()?;
        if tc.numel() != m {
            return Err(dim_err("mul_col", tx, tc));
        }
        let cd = tc.data();
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for o in &mut data[i * n..(i + 1) * n] {
                *o *= cd[i];
            }
        }
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MulCol(x, c), rg))
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != mask.shape() {
            return Err(dim_err("mul_const", tx, mask));
        }
        let data = tx.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MulConst(x, mask.data().to_vec()), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; negative or NaN input is a numeric error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Numeric("log: negative or NaN input".into()));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Elementwise `f` with a caller-supplied derivative `df(x, f(x))`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: Derivative) -> Var {
        self.unary(x, f, Op::Map(x, df))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_finite("softmax_rows", tx)?;
        let (m, n) = tx.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&tx.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        check_finite("log_softmax_rows", tx)?;
        let (m, n) = tx.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            log_softmax_row(&tx.data()[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmaxRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        if start > end || end > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&tx.data()[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols(x, start, end), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var], cols: usize) -> Result<Var> {
        let mut out = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let t = self.value(p);
            let (m, n) = t.dims2()?;
            if n != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![cols],
                });
            }
            out.extend_from_slice(t.data());
            rows += m;
            rg |= self.rg(p);
        }
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Selects rows by index (embedding lookup, row permutation).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            if r >= m {
                return Err(Error::Data(format!("gather_rows: index {r} out of range for {m} rows")));
            }
            out.extend_from_slice(&tx.data()[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x);
        let value = Tensor::matrix(idx.len(), n, out)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// `out[i, x] = log Σ_k exp(log_prior[i, k] + components[k][i, x])`.
    ///
    /// The log of a mixture of distributions given log weights `[N×K]` and
    /// `K` log distributions `[N×V]`.
    pub fn mixture_logsumexp(&mut self, log_prior: Var, components: &[Var]) -> Result<Var> {
        let tp = self.value(log_prior);
        let (m, k) = tp.dims2()?;
        if components.len() != k || k == 0 {
            return Err(Error::Dimension {
                op: "mixture_logsumexp",
                lhs: tp.shape().to_vec(),
                rhs: vec![components.len()],
            });
        }
        let (m0, n) = self.value(components[0]).dims2()?;
        for &c in components {
            let tc = self.value(c);
            if tc.dims2()? != (m0, n) || m0 != m {
                return Err(dim_err("mixture_logsumexp", tp, tc));
            }
        }
        let prior = tp.data();
        let comps: Vec<&[f64]> = components.iter().map(|&c| self.value(c).data()).collect();
        let mut out = vec![0.0; m * n];
        let mut terms = vec![0.0; k];
        for i in 0..m {
            for x in 0..n {
                let mut max = f64::NEG_INFINITY;
                for (kk, t) in terms.iter_mut().enumerate() {
                    *t = prior[i * k + kk] + comps[kk][i * n + x];
                    max = max.max(*t);
                }
                out[i * n + x] = if max == f64::NEG_INFINITY {
                    max
                } else {
                    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
                };
            }
        }
        let mut rg = self.rg(log_prior);
        for &c in components {
            rg |= self.rg(c);
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MixtureLogSumExp(log_prior, components.to_vec()), rg))
    }

    /// `Σ_i weights[i] · (−log_probs[i, targets[i]]) / N`.
    pub fn weighted_nll(&mut self, log_probs: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(log_probs);
        let (m, n) = t.dims2()?;
        if targets.len() != m || weights.len() != m {
            return Err(Error::Dimension {
                op: "weighted_nll",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if m == 0 {
            return Err(Error::Contract("weighted_nll over zero positions".into()));
        }
        let mut total = 0.0;
        for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            if y >= n {
                return Err(Error::Data(format!(
                    "target id {y} at position {i} out of range for {n} classes"
                )));
            }
            total += w * -t.data()[i * n + y];
        }
        let value = Tensor::scalar(total / m as f64);
        let rg = self.rg(log_probs);
        Ok(self.push(
            value,
            Op::WeightedNll(log_probs, targets.to_vec(), weights.to_vec()),
            rg,
        ))
    }

    /// `Σ_i Σ_x −soft[i, x] · log_probs[i, x] / N`; zero-probability entries
    /// contribute nothing, so `−∞` log-probabilities under them are harmless.
    pub fn soft_cross_entropy(&mut self, log_probs: Var, soft: &Tensor) -> Result<Var> {
        let t = self.value(log_probs);
        let (m, n) = t.dims2()?;
        if soft.dims2()? != (m, n) {
            return Err(dim_err("soft_cross_entropy", t, soft));
        }
        if m == 0 {
            return Err(Error::Contract("soft_cross_entropy over zero positions".into()));
        }
        let (lp, q) = (t.data(), soft.data());
        let mut total = 0.0;
        for i in 0..m {
            let mut row = 0.0;
            for x in 0..n {
                let qx = q[i * n + x];
                if qx != 0.0 {
                    row += qx * -lp[i * n + x];
                }
            }
            total += row;
        }
        let value = Tensor::scalar(total / m as f64);
        let rg = self.rg(log_probs);
        Ok(self.push(value, Op::SoftCrossEntropy(log_probs, soft.data().to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let len = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("checked");
                let (_, n) = tb.dims2().expect("checked");
                let (ad, bd) = (ta.data(), tb.data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for (&gv, &bv) in grow.iter().zip(brow) {
                                s += gv * bv;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().expect("checked");
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (o, &gv) in gb.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let n = self.value(*bias).numel();
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulCol(x, c) => {
                let (tx, cd) = (self.value(*x), self.value(*c).data());
                let (m, n) = tx.dims2().expect("checked");
                let xd = tx.data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[i * n + j] * cd[i];
                        }
                    }
                });
                self.accumulate(grads, *c, |gc| {
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * xd[i * n + j];
                        }
                        gc[i] += s;
                    }
                });
            }
            Op::MulConst(x, mask) => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &mv) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gv * mv;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &gv) in gx.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                });
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, |gx| add_into(gx, g)),
            Op::Sigmoid(x) => self.accumulate(grads, *x, |gx| {
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gv * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => self.accumulate(grads, *x, |gx| {
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gv * (1.0 - y * y);
                }
            }),
            Op::Exp(x) => self.accumulate(grads, *x, |gx| {
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                    *o += gv * y;
                }
            }),
            Op::Log(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gv / xv;
                    }
                });
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gv * 2.0 * xv;
                    }
                });
            }
            Op::Map(x, df) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for (((o, &gv), &xv), &y) in gx.iter_mut().zip(g).zip(xd).zip(out) {
                        *o += gv * df(xv, y);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = node.value.dims2().expect("checked");
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&out[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            gx[j] += out[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let (m, n) = node.value.dims2().expect("checked");
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let gsum: f64 = g[r.clone()].iter().sum();
                        for j in r {
                            gx[j] += g[j] - out[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::SliceCols(x, start, end) => {
                let (m, n) = self.value(*x).dims2().expect("checked");
                let w = end - start;
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        add_into(&mut gx[i * n + start..i * n + end], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let (_, n) = self.value(*x).dims2().expect("checked");
                self.accumulate(grads, *x, |gx| {
                    for (i, &r) in idx.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::MixtureLogSumExp(log_prior, comps) => {
                let prior = self.value(*log_prior).data();
                let k = comps.len();
                let (m, n) = node.value.dims2().expect("checked");
                // responsibility of expert kk for entry (i, x)
                let resp = |kk: usize, i: usize, x: usize| -> f64 {
                    let o = out[i * n + x];
                    if o == f64::NEG_INFINITY {
                        return 0.0;
                    }
                    (prior[i * k + kk] + self.value(comps[kk]).data()[i * n + x] - o).exp()
                };
                self.accumulate(grads, *log_prior, |gp| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for x in 0..n {
                                s += g[i * n + x] * resp(kk, i, x);
                            }
                            gp[i * k + kk] += s;
                        }
                    }
                });
                for (kk, &c) in comps.iter().enumerate() {
                    self.accumulate(grads, c, |gc| {
                        for i in 0..m {
                            for x in 0..n {
                                gc[i * n + x] += g[i * n + x] * resp(kk, i, x);
                            }
                        }
                    });
                }
            }
            Op::WeightedNll(lp, targets, weights) => {
                let (m, n) = self.value(*lp).dims2().expect("checked");
                let inv_n = 1.0 / m as f64;
                self.accumulate(grads, *lp, |gl| {
                    for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        gl[i * n + y] += -(w * g[0]) * inv_n;
                    }
                });
            }
            Op::SoftCrossEntropy(lp, soft) => {
                let (m, _) = self.value(*lp).dims2().expect("checked");
                let inv_n = 1.0 / m as f64;
                self.accumulate(grads, *lp, |gl| {
                    for (o, &q) in gl.iter_mut().zip(soft) {
                        if q != 0.0 {
                            *o += -(q * g[0]) * inv_n;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
