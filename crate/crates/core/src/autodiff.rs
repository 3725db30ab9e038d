//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns the computation graph. Nodes are appended in forward
//! order and referenced through copyable [`Var`] handles, so the reverse
//! index order is a valid reverse topological order for the backward pass.
//! One tape is one computation; trainers build a fresh tape per step.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Norm floor below which a feature row counts as degenerate.
pub const NORM_FLOOR: f64 = 1e-12;

/// Domain floor for `log`: the forward computes `ln(max(x, LOG_FLOOR))`,
/// so exactly-zero probabilities stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Value copy with gradient flow severed.
    Detach,
    Add(Var, Var),
    /// Adds a 1 x n row vector to every row of an m x n matrix.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Tanh(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SelectColumns(Var, Vec<usize>),
    /// Frobenius inner product of a constant weight tensor with a node.
    FrobeniusInner(Tensor, Var),
    SoftmaxRows(Var, f64),
    L2NormalizeRows(Var),
    /// Divides each row by (row sum + floor).
    RowNormalizeFloored(Var, f64),
    /// Stacks the rows of two matrices with equal column counts.
    Vstack(Var, Var),
}

struct Node {
    value: Tensor,
    grad: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    // Non-finite values are allowed to flow: the trainer checks the final
    // loss and reports divergence rather than dying mid-graph.
    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf (data, labels, fixed couplings).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    /// Same value, gradient flow to parents severed.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, false, Op::Detach)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let data = zip_map(va, vb, |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, rg, Op::Add(a, b)))
    }

    /// `x + row` where `row` is 1 x n and `x` is m x n.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(shape_err("add_row", vx, vr));
        }
        let (m, n) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                out.set(i, j, vx.at(i, j) + vr.at(0, j));
            }
        }
        let rg = self.requires(x) || self.requires(row);
        Ok(self.push(out, rg, Op::AddRow(x, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va, vb));
        }
        let data = zip_map(va, vb, |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va, vb));
        }
        let data = zip_map(va, vb, |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, rg, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x.0].value.map(|v| c * v);
        let rg = self.requires(x);
        self.push(value, rg, Op::ScalarMul(x, c))
    }

    /// `ln(max(x, LOG_FLOOR))` elementwise.
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(LOG_FLOOR).ln());
        let rg = self.requires(x);
        self.push(value, rg, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(f64::abs);
        let rg = self.requires(x);
        self.push(value, rg, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(0.0));
        let rg = self.requires(x);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(f64::tanh);
        let rg = self.requires(x);
        self.push(value, rg, Op::Tanh(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.transpose();
        let rg = self.requires(x);
        self.push(value, rg, Op::Transpose(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.data().iter().sum());
        let rg = self.requires(x);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel() as f64;
        let value = Tensor::scalar(self.nodes[x.0].value.data().iter().sum::<f64>() / n);
        let rg = self.requires(x);
        self.push(value, rg, Op::Mean(x))
    }

    /// Row sums of an m x n matrix as an m x 1 column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let (m, n) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(&[m, 1]);
        for i in 0..m {
            out.set(i, 0, (0..n).map(|j| v.at(i, j)).sum());
        }
        let rg = self.requires(x);
        self.push(out, rg, Op::RowSum(x))
    }

    /// Gather the given columns, in order. Indices may repeat.
    pub fn select_columns(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        let (m, n) = (v.rows(), v.cols());
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::InvalidParameter(format!(
                "select_columns: index {bad} out of range for {n} columns"
            )));
        }
        let mut out = Tensor::zeros(&[m, indices.len()]);
        for i in 0..m {
            for (k, &j) in indices.iter().enumerate() {
                out.set(i, k, v.at(i, j));
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::SelectColumns(x, indices.to_vec())))
    }

    /// Frobenius inner product of a constant weight tensor with a node.
    pub fn frobenius_inner(&mut self, weights: &Tensor, x: Var) -> Result<Var> {
        let s = weights.frobenius_dot(&self.nodes[x.0].value)?;
        let rg = self.requires(x);
        Ok(self.push(
            Tensor::scalar(s),
            rg,
            Op::FrobeniusInner(weights.clone(), x),
        ))
    }

    /// Row-wise softmax of `x / temperature`, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let v = &self.nodes[x.0].value;
        let (m, n) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row_max = v.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = ((v.at(i, j) - row_max) / temperature).exp();
                out.set(i, j, e);
                denom += e;
            }
            for j in 0..n {
                out.set(i, j, out.at(i, j) / denom);
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::SoftmaxRows(x, temperature)))
    }

    /// Normalize every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.l2_normalize_rows(NORM_FLOOR)?;
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::L2NormalizeRows(x)))
    }

    /// Divide each row by (row sum + floor). Total on zero rows.
    pub fn row_normalize_floored(&mut self, x: Var, floor: f64) -> Result<Var> {
        if floor <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "row normalization floor must be positive, got {floor}"
            )));
        }
        let v = &self.nodes[x.0].value;
        let (m, n) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let s: f64 = v.row(i).iter().sum::<f64>() + floor;
            for j in 0..n {
                out.set(i, j, v.at(i, j) / s);
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out, rg, Op::RowNormalizeFloored(x, floor)))
    }

    /// Rows of `a` followed by rows of `b`.
    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.vstack(&self.nodes[b.0].value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Vstack(a, b)))
    }

    /// Reverse pass from a scalar root. Accumulates into `grad` of every
    /// reachable node whose `requires_grad` is set.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::NonScalarRoot(
                self.nodes[root.0].value.shape().to_vec(),
            ));
        }
        self.nodes[root.0].grad = Tensor::scalar(1.0);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, delta: &Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        debug_assert_eq!(self.nodes[target.0].grad.shape(), delta.shape());
        for (g, d) in self.nodes[target.0]
            .grad
            .data_mut()
            .iter_mut()
            .zip(delta.data())
        {
            *g += d;
        }
    }

    fn backward_op(&mut self, idx: usize, op: &Op) {
        match op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                let g = self.nodes[idx].grad.clone();
                self.accumulate(*a, &g);
                self.accumulate(*b, &g);
            }
            Op::AddRow(x, row) => {
                let g = self.nodes[idx].grad.clone();
                self.accumulate(*x, &g);
                let (m, n) = (g.rows(), g.cols());
                let mut gr = Tensor::zeros(&[1, n]);
                for i in 0..m {
                    for j in 0..n {
                        gr.set(0, j, gr.at(0, j) + g.at(i, j));
                    }
                }
                self.accumulate(*row, &gr);
            }
            Op::Sub(a, b) => {
                let g = self.nodes[idx].grad.clone();
                self.accumulate(*a, &g);
                self.accumulate(*b, &g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let g = self.nodes[idx].grad.clone();
                let ga = zip_map(&g, &self.nodes[b.0].value, |d, y| d * y);
                let gb = zip_map(&g, &self.nodes[a.0].value, |d, x| d * x);
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::ScalarMul(x, c) => {
                let g = self.nodes[idx].grad.map(|v| c * v);
                self.accumulate(*x, &g);
            }
            Op::Log(x) => {
                // Forward is ln(max(x, floor)): flat below the floor.
                let g = zip_map(&self.nodes[idx].grad, &self.nodes[x.0].value, |d, v| {
                    if v > LOG_FLOOR {
                        d / v
                    } else {
                        0.0
                    }
                });
                self.accumulate(*x, &g);
            }
            Op::Abs(x) => {
                let g = zip_map(&self.nodes[idx].grad, &self.nodes[x.0].value, |d, v| {
                    d * sign_zero(v)
                });
                self.accumulate(*x, &g);
            }
            Op::Relu(x) => {
                let g = zip_map(&self.nodes[idx].grad, &self.nodes[x.0].value, |d, v| {
                    if v > 0.0 {
                        d
                    } else {
                        0.0
                    }
                });
                self.accumulate(*x, &g);
            }
            Op::Tanh(x) => {
                let g = zip_map(&self.nodes[idx].grad, &self.nodes[idx].value, |d, y| {
                    d * (1.0 - y * y)
                });
                self.accumulate(*x, &g);
            }
            Op::Matmul(a, b) => {
                let g = self.nodes[idx].grad.clone();
                let ga = g.matmul(&self.nodes[b.0].value.transpose()).unwrap();
                let gb = self.nodes[a.0].value.transpose().matmul(&g).unwrap();
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Transpose(x) => {
                let g = self.nodes[idx].grad.transpose();
                self.accumulate(*x, &g);
            }
            Op::Sum(x) => {
                let d = self.nodes[idx].grad.item();
                let g = self.nodes[x.0].value.map(|_| d);
                self.accumulate(*x, &g);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                let d = self.nodes[idx].grad.item() / n;
                let g = self.nodes[x.0].value.map(|_| d);
                self.accumulate(*x, &g);
            }
            Op::RowSum(x) => {
                let g = self.nodes[idx].grad.clone();
                let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let d = g.at(i, 0);
                    for j in 0..n {
                        gx.set(i, j, d);
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::SelectColumns(x, indices) => {
                let g = self.nodes[idx].grad.clone();
                let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for (k, &j) in indices.iter().enumerate() {
                        gx.set(i, j, gx.at(i, j) + g.at(i, k));
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::FrobeniusInner(weights, x) => {
                let d = self.nodes[idx].grad.item();
                let g = weights.map(|w| d * w);
                self.accumulate(*x, &g);
            }
            Op::SoftmaxRows(x, temperature) => {
                let y = &self.nodes[idx].value;
                let g = &self.nodes[idx].grad;
                let (m, n) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let dot: f64 = (0..n).map(|j| g.at(i, j) * y.at(i, j)).sum();
                    for j in 0..n {
                        gx.set(i, j, y.at(i, j) * (g.at(i, j) - dot) / temperature);
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::L2NormalizeRows(x) => {
                let y = &self.nodes[idx].value;
                let g = &self.nodes[idx].grad;
                let xv = &self.nodes[x.0].value;
                let (m, n) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let norm = xv.row_norm(i);
                    let dot: f64 = (0..n).map(|j| g.at(i, j) * y.at(i, j)).sum();
                    for j in 0..n {
                        gx.set(i, j, (g.at(i, j) - y.at(i, j) * dot) / norm);
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::Vstack(a, b) => {
                let g = self.nodes[idx].grad.clone();
                let rows_a = self.nodes[a.0].value.rows();
                let ga = g.select_rows(&(0..rows_a).collect::<Vec<_>>());
                let gb = g.select_rows(&(rows_a..g.rows()).collect::<Vec<_>>());
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::RowNormalizeFloored(x, floor) => {
                let y = &self.nodes[idx].value;
                let g = &self.nodes[idx].grad;
                let xv = &self.nodes[x.0].value;
                let (m, n) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let s: f64 = xv.row(i).iter().sum::<f64>() + floor;
                    let dot: f64 = (0..n).map(|j| g.at(i, j) * y.at(i, j)).sum();
                    for j in 0..n {
                        gx.set(i, j, (g.at(i, j) - dot) / s);
                    }
                }
                self.accumulate(*x, &gx);
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map preserves shape")
}

fn sign_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Outcome of comparing an analytic gradient against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Flat index (tensor index, coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Relative error with an absolute floor so near-zero gradients are judged
/// on the absolute scale instead of blowing up the ratio.
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Check the gradient of a scalar-valued graph w.r.t. several input tensors.
///
/// `f` receives a fresh tape and one differentiable leaf per input tensor
/// and must return the scalar root. The analytic gradient from one backward
/// pass is compared coordinate-by-coordinate against central differences
/// `(f(x+h) - f(x-h)) / 2h`.
pub fn grad_check_multi<F>(
    f: &F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).item())
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).clone()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        tolerance: tol,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(analytic[ti].data()[ci], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ci);
            }
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(f: &F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(&|tape: &mut Tape, vars: &[Var]| f(tape, vars[0]), &[x.clone()], step, tol)
}
