//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation eagerly: the primal value is
//! computed when the node is pushed, and [`Tape::backward`] walks the
//! nodes in reverse to accumulate adjoints. The primitive set is closed
//! and covers exactly what the few-shot pipeline needs, including a few
//! fused nodes (pairwise ball distances, batch/layer normalisation and
//! norm clipping) whose adjoints are written out by hand.
//!
//! ```
//! use app2s::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod gradcheck;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward root must be a 1x1 scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("gather index {index} out of bounds for {len} elements")]
    Index { index: usize, len: usize },
    #[error("distance argument {0} left the ball")]
    Domain(f64),
    #[error("empty operand list in {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise scalar functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Func {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Recip,
    Artanh,
    Square,
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
    /// `artanh(sqrt(c s)) / sqrt(c s)`, smooth at `s = 0`.
    ArtanhRatio { c: f64 },
    /// `tanh(sqrt(c s)) / sqrt(c s)`, smooth at `s = 0`.
    TanhRatio { c: f64 },
}

const SERIES_CUTOFF: f64 = 1e-3;

impl Func {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Func::Relu => x.max(0.0),
            Func::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Func::Tanh => x.tanh(),
            Func::Exp => x.exp(),
            Func::Ln => x.ln(),
            Func::Sqrt => x.sqrt(),
            Func::Recip => 1.0 / x,
            Func::Artanh => x.atanh(),
            Func::Square => x * x,
            Func::Affine { scale, shift } => scale * x + shift,
            Func::ArtanhRatio { c } => {
                let q = c * x;
                if q.abs() < SERIES_CUTOFF {
                    1.0 + q / 3.0 + q * q / 5.0 + q * q * q / 7.0 + q * q * q * q / 9.0
                } else {
                    let t = q.sqrt();
                    t.atanh() / t
                }
            }
            Func::TanhRatio { c } => {
                let q = c * x;
                if q.abs() < SERIES_CUTOFF {
                    1.0 - q / 3.0 + 2.0 * q * q / 15.0 - 17.0 * q * q * q / 315.0
                        + 62.0 * q * q * q * q / 2835.0
                } else {
                    let t = q.sqrt();
                    t.tanh() / t
                }
            }
        }
    }

    /// Derivative given the input `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Func::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Func::Sigmoid => y * (1.0 - y),
            Func::Tanh => 1.0 - y * y,
            Func::Exp => y,
            Func::Ln => 1.0 / x,
            Func::Sqrt => 0.5 / y,
            Func::Recip => -y * y,
            Func::Artanh => 1.0 / (1.0 - x * x),
            Func::Square => 2.0 * x,
            Func::Affine { scale, .. } => scale,
            Func::ArtanhRatio { c } => {
                let q = c * x;
                if q.abs() < SERIES_CUTOFF {
                    c * (1.0 / 3.0 + 2.0 * q / 5.0 + 3.0 * q * q / 7.0 + 4.0 * q * q * q / 9.0)
                } else {
                    c / (2.0 * q) * (1.0 / (1.0 - q) - y)
                }
            }
            Func::TanhRatio { c } => {
                let q = c * x;
                if q.abs() < SERIES_CUTOFF {
                    c * (-1.0 / 3.0 + 4.0 * q / 15.0 - 51.0 * q * q / 315.0
                        + 248.0 * q * q * q / 2835.0)
                } else {
                    let th = q.sqrt().tanh();
                    c / (2.0 * q) * ((1.0 - th * th) - y)
                }
            }
        }
    }
}

/// Normalisation statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone, PartialEq)]
pub enum NormStats {
    /// Use the statistics of the current batch.
    Batch,
    /// Use fixed running statistics (evaluation mode).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when the batch has a single row).
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    RowSum(Var),
    ColSum(Var),
    RowSqNorm(Var),
    RowDot(Var, Var),
    Map(Var, Func),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch: bool,
        over_rows: bool,
    },
    PairwiseDist {
        a: Var,
        b: Var,
        curvature: Option<f64>,
    },
    ClipRows(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, operands: &[Var]) -> Var {
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.rows(), ta.cols(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_with(a, b, |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a (r x c) + b (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_slice_mut(r).iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, b), &[a, b]))
    }

    /// `a (r x c) * b (r x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.cols() != 1 || tb.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tb));
        }
        let mut v = ta.clone();
        for r in 0..v.rows() {
            let s = tb.data()[r];
            for x in v.row_slice_mut(r) {
                *x *= s;
            }
        }
        Ok(self.push(v, Op::MulCol(a, b), &[a, b]))
    }

    /// `a * s` with `s` a `1 x 1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.shape() != (1, 1) {
            return Err(shape_err("scale_by", ta, ts));
        }
        let k = ts.item();
        let v = ta.map(|x| x * k);
        Ok(self.push(v, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), 0.0, out.data_mut());
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `r x c -> r x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::col((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect());
        self.push(v, Op::RowSum(a), &[a])
    }

    /// Sum across rows: `r x c -> 1 x c`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (acc, x) in v.iter_mut().zip(t.row_slice(r)) {
                *acc += x;
            }
        }
        self.push(Tensor::row(v), Op::ColSum(a), &[a])
    }

    /// Squared Euclidean norm of each row: `r x c -> r x 1`.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::col(
            (0..t.rows())
                .map(|r| t.row_slice(r).iter().map(|x| x * x).sum())
                .collect(),
        );
        self.push(v, Op::RowSqNorm(a), &[a])
    }

    /// Row-wise inner products: `r x c, r x c -> r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let v = Tensor::col(
            (0..ta.rows())
                .map(|r| {
                    ta.row_slice(r)
                        .iter()
                        .zip(tb.row_slice(r))
                        .map(|(x, y)| x * y)
                        .sum()
                })
                .collect(),
        );
        Ok(self.push(v, Op::RowDot(a, b), &[a, b]))
    }

    pub fn map(&mut self, a: Var, f: Func) -> Var {
        let v = self.value(a).map(|x| f.eval(x));
        self.push(v, Op::Map(a, f), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Func::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Func::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Func::Tanh)
    }

    pub fn artanh(&mut self, a: Var) -> Var {
        self.map(a, Func::Artanh)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Func::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, Func::Recip)
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.map(a, Func::Affine { scale, shift })
    }

    /// Euclidean norm of each row (not differentiable at zero rows).
    pub fn row_norm(&mut self, a: Var) -> Var {
        let s = self.row_sq_norm(a);
        self.sqrt(s)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = t.clone();
        for r in 0..v.rows() {
            let row = v.row_slice_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut v = t.clone();
        for r in 0..v.rows() {
            let row = v.row_slice_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::Empty("concat_cols"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            for r in 0..rows {
                out.row_slice_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row_slice(r));
            }
            offset += t.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::Empty("concat_rows"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `out.data[i] = a.data[index[i]]`, shaped `rows x cols`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if index.len() != rows * cols {
            return Err(AutodiffError::Shape {
                op: "gather",
                left: (rows, cols),
                right: (index.len(), 1),
            });
        }
        let src = t.data();
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            data.push(*src.get(i).ok_or(AutodiffError::Index {
                index: i,
                len: src.len(),
            })?);
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::Gather(a, index), &[a]))
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        let index = (start * cols..(start + count) * cols).collect();
        self.gather(a, index, count, cols)
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(a).rows() != 1 {
            return Err(shape_err("repeat_row", self.value(a), &Tensor::zeros(1, cols)));
        }
        let index = (0..n).flat_map(|_| 0..cols).collect();
        self.gather(a, index, n, cols)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(shape_err("reshape", t, &Tensor::zeros(rows, cols)));
        }
        let out = Tensor::new(rows, cols, t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Per-column normalisation across rows, then `gamma * xhat + beta`.
    ///
    /// With [`NormStats::Batch`] the returned statistics describe the batch.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.shape() != (1, cols) || tb.shape() != (1, cols) {
            return Err(shape_err("batch_norm", tx, tg));
        }
        let rows = tx.rows();
        let (mean, var_biased, batch) = match &stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; cols];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(tx.row_slice(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for ((s, v), m) in var.iter_mut().zip(tx.row_slice(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(shape_err("batch_norm", tx, &Tensor::zeros(1, mean.len())));
                }
                (mean.clone(), var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = tx.clone();
        let mut out = tx.clone();
        for r in 0..rows {
            let xr = xhat.row_slice_mut(r);
            for j in 0..cols {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let or = out.row_slice_mut(r);
            for j in 0..cols {
                or[j] = tg.data()[j] * xr[j] + tb.data()[j];
            }
        }
        let observed = batch.then(|| {
            let unbias = if rows > 1 {
                rows as f64 / (rows - 1) as f64
            } else {
                1.0
            };
            BatchStats {
                mean: mean.clone(),
                var: var_biased.iter().map(|v| v * unbias).collect(),
            }
        });
        let op = Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch,
            over_rows: true,
        };
        Ok((self.push(out, op, &[x, gamma, beta]), observed))
    }

    /// Per-row normalisation across columns, then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.shape() != (1, cols) || tb.shape() != (1, cols) {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = tx.clone();
        let mut out = tx.clone();
        let mut inv_std = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = xhat.row_slice_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
            let orow = out.row_slice_mut(r);
            for j in 0..cols {
                orow[j] = tg.data()[j] * row[j] + tb.data()[j];
            }
        }
        let op = Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch: true,
            over_rows: false,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Distances between every row of `a` (m x c) and of `b` (n x c).
    ///
    /// `Some(c)` gives the Poincaré geodesic distance of curvature `-c`,
    /// evaluated through the closed form
    /// `|(-x) (+) y| = |x - y| / sqrt(c|x - y|^2 + (1 - c|x|^2)(1 - c|y|^2))`
    /// which keeps full precision for nearby points. `None` gives `2|x - y|`,
    /// the zero-curvature limit.
    pub fn pairwise_dist(&mut self, a: Var, b: Var, curvature: Option<f64>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("pairwise_dist", ta, tb));
        }
        let (m, n) = (ta.rows(), tb.rows());
        let mut out = Tensor::zeros(m, n);
        let b_sq: Vec<f64> = (0..n)
            .map(|j| tb.row_slice(j).iter().map(|v| v * v).sum())
            .collect();
        for i in 0..m {
            let x = ta.row_slice(i);
            let x_sq: f64 = x.iter().map(|v| v * v).sum();
            for j in 0..n {
                let y = tb.row_slice(j);
                let u: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                let d = match curvature {
                    None => 2.0 * u.sqrt(),
                    Some(c) => {
                        let ab = (1.0 - c * x_sq) * (1.0 - c * b_sq[j]);
                        let t = (c * u / (c * u + ab)).sqrt();
                        if !(t < 1.0) || ab <= 0.0 {
                            return Err(AutodiffError::Domain(t));
                        }
                        2.0 / c.sqrt() * t.atanh()
                    }
                };
                out.set(i, j, d);
            }
        }
        Ok(self.push(out, Op::PairwiseDist { a, b, curvature }, &[a, b]))
    }

    /// Rescales rows whose norm exceeds `mu` onto the sphere of radius `mu`.
    pub fn clip_rows(&mut self, x: Var, mu: f64) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_slice_mut(r);
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > mu {
                row.iter_mut().for_each(|a| *a *= mu / n);
            }
        }
        self.push(v, Op::ClipRows(x, mu), &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(logits).shape();
        if targets.len() != rows {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                left: (rows, cols),
                right: (targets.len(), 1),
            });
        }
        let lsm = self.log_softmax_rows(logits);
        let index: Vec<usize> = targets.iter().enumerate().map(|(r, &t)| r * cols + t).collect();
        let picked = self.gather(lsm, index, rows, 1)?;
        let total = self.sum(picked);
        Ok(self.scale(total, -1.0 / rows.max(1) as f64))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor)| {
            if !self.wants(v) {
                return;
            }
            let (r, c) = self.nodes[v.0].value.shape();
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.add_assign(g));
                acc(*b, &mut |s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.add_assign(g));
                acc(*b, &mut |s| {
                    s.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((x, gi), bi) in s.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, gi), ai) in s.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((x, gi), bi) in s.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *x += gi / bi;
                    }
                });
                acc(*b, &mut |s| {
                    let it = s.data_mut().iter_mut().zip(g.data()).zip(ta.data()).zip(tb.data());
                    for (((x, gi), ai), bi) in it {
                        *x -= gi * ai / (bi * bi);
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                s.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += k * y)
            }),
            Op::AddRow(a, b) => {
                acc(*a, &mut |s| s.add_assign(g));
                acc(*b, &mut |s| {
                    for r in 0..g.rows() {
                        for (x, y) in s.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::MulCol(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for r in 0..g.rows() {
                        let k = tb.data()[r];
                        for (x, y) in s.row_slice_mut(r).iter_mut().zip(g.row_slice(r)) {
                            *x += k * y;
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..g.rows() {
                        let d: f64 = g.row_slice(r).iter().zip(ta.row_slice(r)).map(|(p, q)| p * q).sum();
                        s.data_mut()[r] += d;
                    }
                });
            }
            Op::ScaleBy(a, k) => {
                let (ta, tk) = (val(*a), val(*k));
                let kv = tk.item();
                acc(*a, &mut |s| {
                    s.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += kv * y)
                });
                acc(*k, &mut |s| {
                    let d: f64 = g.data().iter().zip(ta.data()).map(|(p, q)| p * q).sum();
                    s.data_mut()[0] += d;
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G B^T, dB = A^T G
                acc(*a, &mut |s| {
                    gemm(m, n, k, g.data(), (n, 1), tb.data(), (1, n), 1.0, s.data_mut())
                });
                acc(*b, &mut |s| {
                    gemm(k, m, n, ta.data(), (1, k), g.data(), (n, 1), 1.0, s.data_mut())
                });
            }
            Op::Transpose(a) => acc(*a, &mut |s| s.add_assign(&g.transpose())),
            Op::Sum(a) => {
                let gv = g.item();
                acc(*a, &mut |s| s.data_mut().iter_mut().for_each(|x| *x += gv));
            }
            Op::RowSum(a) => acc(*a, &mut |s| {
                for r in 0..s.rows() {
                    let gv = g.data()[r];
                    s.row_slice_mut(r).iter_mut().for_each(|x| *x += gv);
                }
            }),
            Op::ColSum(a) => acc(*a, &mut |s| {
                for r in 0..s.rows() {
                    for (x, y) in s.row_slice_mut(r).iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }),
            Op::RowSqNorm(a) => {
                let ta = val(*a);
                acc(*a, &mut |s| {
                    for r in 0..s.rows() {
                        let gv = 2.0 * g.data()[r];
                        for (x, y) in s.row_slice_mut(r).iter_mut().zip(ta.row_slice(r)) {
                            *x += gv * y;
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                for (target, other) in [(*a, tb), (*b, ta)] {
                    acc(target, &mut |s| {
                        for r in 0..s.rows() {
                            let gv = g.data()[r];
                            for (x, y) in s.row_slice_mut(r).iter_mut().zip(other.row_slice(r)) {
                                *x += gv * y;
                            }
                        }
                    });
                }
            }
            Op::Map(a, f) => {
                let ta = val(*a);
                let out = &node.value;
                acc(*a, &mut |s| {
                    let it = s.data_mut().iter_mut().zip(g.data()).zip(ta.data()).zip(out.data());
                    for (((x, gi), xi), yi) in it {
                        if *gi != 0.0 {
                            *x += gi * f.derivative(*xi, *yi);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((x, yi), gi) in s.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                            *x += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let total: f64 = gr.iter().sum();
                        for ((x, yi), gi) in s.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                            *x += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |s| {
                        for r in 0..g.rows() {
                            let src = &g.row_slice(r)[offset..offset + w];
                            for (x, y) in s.row_slice_mut(r).iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    acc(p, &mut |s| {
                        let src = &g.data()[offset..offset + n];
                        s.data_mut().iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    });
                    offset += n;
                }
            }
            Op::Gather(a, index) => acc(*a, &mut |s| {
                let dst = s.data_mut();
                for (&i, gi) in index.iter().zip(g.data()) {
                    dst[i] += gi;
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |s| {
                s.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y)
            }),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
                over_rows,
            } => {
                let tg = val(*gamma);
                let (rows, cols) = xhat.shape();
                acc(*beta, &mut |s| {
                    for r in 0..rows {
                        for (acc_b, gi) in s.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *acc_b += gi;
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for r in 0..rows {
                        let it = s.data_mut().iter_mut().zip(g.row_slice(r)).zip(xhat.row_slice(r));
                        for ((acc_g, gi), xh) in it {
                            *acc_g += gi * xh;
                        }
                    }
                });
                acc(*x, &mut |s| {
                    norm_input_grad(s, g, xhat, inv_std, tg.data(), *batch, *over_rows, rows, cols)
                });
            }
            Op::PairwiseDist { a, b, curvature } => {
                let (ta, tb) = (val(*a), val(*b));
                let (ga, gb) = pairwise_grad(ta, tb, g, *curvature);
                acc(*a, &mut |s| s.add_assign(&ga));
                acc(*b, &mut |s| s.add_assign(&gb));
            }
            Op::ClipRows(x, mu) => {
                let tx = val(*x);
                acc(*x, &mut |s| {
                    for r in 0..tx.rows() {
                        let xr = tx.row_slice(r);
                        let gr = g.row_slice(r);
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let sr = s.row_slice_mut(r);
                        if n > *mu {
                            // mu/|x| (I - x x^T / |x|^2) g
                            let proj: f64 = xr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / (n * n);
                            for ((acc_x, gi), xi) in sr.iter_mut().zip(gr).zip(xr) {
                                *acc_x += mu / n * (gi - proj * xi);
                            }
                        } else {
                            sr.iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                        }
                    }
                });
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn norm_input_grad(
    s: &mut Tensor,
    g: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
    batch: bool,
    over_rows: bool,
    rows: usize,
    cols: usize,
) {
    if over_rows {
        for j in 0..cols {
            let gj = gamma[j];
            let is = inv_std[j];
            if !batch {
                for r in 0..rows {
                    s.data_mut()[r * cols + j] += g.get(r, j) * gj * is;
                }
                continue;
            }
            let n = rows as f64;
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for r in 0..rows {
                let d = g.get(r, j) * gj;
                sum_d += d;
                sum_dx += d * xhat.get(r, j);
            }
            for r in 0..rows {
                let d = g.get(r, j) * gj;
                s.data_mut()[r * cols + j] += is / n * (n * d - sum_d - xhat.get(r, j) * sum_dx);
            }
        }
    } else {
        let n = cols as f64;
        for r in 0..rows {
            let is = inv_std[r];
            let gr = g.row_slice(r);
            let xr = xhat.row_slice(r);
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for j in 0..cols {
                let d = gr[j] * gamma[j];
                sum_d += d;
                sum_dx += d * xr[j];
            }
            let sr = s.row_slice_mut(r);
            for j in 0..cols {
                let d = gr[j] * gamma[j];
                sr[j] += is / n * (n * d - sum_d - xr[j] * sum_dx);
            }
        }
    }
}

/// Adjoint of [`Tape::pairwise_dist`].
///
/// For the ball, `d = arcosh(1 + delta) / sqrt(c)` with
/// `delta = 2c|x-y|^2 / (alpha beta)`, `alpha = 1 - c|x|^2`, `beta = 1 - c|y|^2`.
/// Coincident rows get the zero subgradient.
fn pairwise_grad(ta: &Tensor, tb: &Tensor, g: &Tensor, curvature: Option<f64>) -> (Tensor, Tensor) {
    let (m, n, dim) = (ta.rows(), tb.rows(), ta.cols());
    let mut ga = Tensor::zeros(m, dim);
    let mut gb = Tensor::zeros(n, dim);
    let b_sq: Vec<f64> = (0..n)
        .map(|j| tb.row_slice(j).iter().map(|v| v * v).sum())
        .collect();
    for i in 0..m {
        let x = ta.row_slice(i);
        let x_sq: f64 = x.iter().map(|v| v * v).sum();
        for j in 0..n {
            let gij = g.get(i, j);
            if gij == 0.0 {
                continue;
            }
            let y = tb.row_slice(j);
            let u: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
            if u == 0.0 {
                continue;
            }
            match curvature {
                None => {
                    let k = gij * 2.0 / u.sqrt();
                    for l in 0..dim {
                        let diff = x[l] - y[l];
                        ga.data_mut()[i * dim + l] += k * diff;
                        gb.data_mut()[j * dim + l] -= k * diff;
                    }
                }
                Some(c) => {
                    let alpha = 1.0 - c * x_sq;
                    let beta = 1.0 - c * b_sq[j];
                    let delta = 2.0 * c * u / (alpha * beta);
                    let dd_dz = 1.0 / (c.sqrt() * (delta * (2.0 + delta)).sqrt());
                    let k = gij * dd_dz * 4.0 * c / (alpha * beta);
                    let kx = c * u / alpha;
                    let ky = c * u / beta;
                    for l in 0..dim {
                        let diff = x[l] - y[l];
                        ga.data_mut()[i * dim + l] += k * (diff + kx * x[l]);
                        gb.data_mut()[j * dim + l] += k * (-diff + ky * y[l]);
                    }
                }
            }
        }
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_and_matmul_values() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::row(vec![3.0, 4.0]));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);

        let m = t.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = t.constant(Tensor::identity(2));
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p), t.value(m));

        let h = t.leaf(Tensor::scalar(0.5));
        let at = t.artanh(h);
        assert!((t.scalar(at) - 0.549_306_144_334_054_8).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, b), Err(AutodiffError::Shape { .. })));
        assert!(t.matmul(a, a).is_err());
        assert!(t.matmul(a, b).is_ok());
        assert!(matches!(
            t.backward(a),
            Err(AutodiffError::NonScalarRoot((2, 3)))
        ));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::row(vec![0.3, -1.2, 2.0, 0.0]));
        let s = t.softmax_rows(z);
        let total = t.sum(s);
        assert!((t.scalar(total) - 1.0).abs() < 1e-15);
        let g = t.backward(total).unwrap();
        assert!(g.get(z).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn shared_operand_accumulates() {
        // f = a*b + a, df/da = b + 1
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(2.0));
        let b = t.leaf(Tensor::scalar(5.0));
        let ab = t.mul(a, b).unwrap();
        let f = t.add(ab, a).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 6.0);
        assert_eq!(g.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(2.0));
        let k = t.constant(Tensor::scalar(5.0));
        let f = t.mul(a, k).unwrap();
        let g = t.backward(f).unwrap();
        assert!(g.get(k).is_none());
        assert_eq!(g.get(a).unwrap().item(), 5.0);
    }

    #[test]
    fn cross_entropy_single_class_is_zero() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::col(vec![-3.0, 7.5]));
        let loss = t.cross_entropy(logits, &[0, 0]).unwrap();
        assert_eq!(t.scalar(loss), 0.0);
    }

    #[test]
    fn pairwise_dist_matches_reference_geometry() {
        use crate::geometry::{geodesic_distance_c, BallConfig};
        let cfg = BallConfig::with_curvature(0.7).unwrap();
        let a = Tensor::from_rows(&[vec![0.1, -0.3, 0.5], vec![0.0, 0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![-0.6, 0.2, 0.1], vec![0.1, -0.3, 0.5], vec![0.9, 0.1, 0.0]])
            .unwrap();
        let mut t = Tape::new();
        let va = t.leaf(a.clone());
        let vb = t.leaf(b.clone());
        let d = t.pairwise_dist(va, vb, Some(cfg.c())).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let r = geodesic_distance_c(a.row_slice(i), b.row_slice(j), cfg.c(), 0.0).unwrap();
                assert!((t.value(d).get(i, j) - r).abs() < 1e-13, "{i},{j}");
            }
        }
        assert_eq!(t.value(d).get(0, 1), 0.0);
    }

    #[test]
    fn series_branches_are_continuous() {
        for f in [Func::ArtanhRatio { c: 0.7 }, Func::TanhRatio { c: 0.7 }] {
            let lo = SERIES_CUTOFF / 0.7 * (1.0 - 1e-9);
            let hi = SERIES_CUTOFF / 0.7 * (1.0 + 1e-9);
            assert!((f.eval(lo) - f.eval(hi)).abs() < 1e-12);
            let (dl, dh) = (f.derivative(lo, f.eval(lo)), f.derivative(hi, f.eval(hi)));
            assert!((dl - dh).abs() < 1e-9, "{f:?}: {dl} vs {dh}");
        }
    }
}
