//! Matrix-valued Wengert tape for reverse-mode differentiation.
//!
//! The hashing objective composes classification, attraction, repulsion,
//! and quantization terms; deriving their gradients by hand would be the
//! dominant bug source. Instead, every primitive the objective needs is
//! recorded on a tape during the forward pass and replayed backward.
//!
//! A tape is single-threaded by construction (`Rc<RefCell<..>>` is not
//! `Send`), matching the one-trainer-per-tape ownership model. Calling
//! [`Var::backward`] more than once on the same tape zeroes the gradient
//! accumulators first, so repeated calls yield identical results.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

/// Recording tape. Create one per objective evaluation.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a matrix recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

/// Gradients produced by [`Var::backward`], queryable per leaf.
pub struct Gradients {
    tape: Tape,
}

#[derive(Default)]
struct TapeInner {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    grads: Vec<Option<Matrix>>,
}

enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// (matrix n x k, row 1 x k): row added to every matrix row.
    AddRowBroadcast(usize, usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    RowMean(usize),
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Records a leaf (parameter or constant input).
    pub fn leaf(&self, value: Matrix) -> Var {
        let idx = self.inner.borrow_mut().push(value, Op::Leaf);
        Var {
            tape: self.clone(),
            idx,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TapeInner {
    fn push(&mut self, value: Matrix, op: Op) -> usize {
        debug_assert!(value.is_finite_all(), "tape node produced non-finite value");
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        self.values.len() - 1
    }

    fn accumulate(&mut self, idx: usize, delta: Matrix) {
        match &mut self.grads[idx] {
            Some(g) => g.add_in_place(&delta).expect("gradient shapes match"),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_from(&mut self, out: usize) -> Result<()> {
        if self.values[out].shape() != (1, 1) {
            let (r, c) = self.values[out].shape();
            return Err(Error::shape(format!(
                "backward requires a scalar (1x1) output, got {r}x{c}"
            )));
        }
        // Fresh accumulators each call: repeated backward passes agree.
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[out] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..self.values.len()).rev() {
            let Some(g) = self.grads[idx].clone() else {
                continue;
            };
            match self.ops[idx] {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let ga = g.matmul(&self.values[b].transpose()).expect("shape");
                    let gb = self.values[a].transpose().matmul(&g).expect("shape");
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Transpose(a) => self.accumulate(a, g.transpose()),
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(&self.values[b]).expect("shape");
                    let gb = g.hadamard(&self.values[a]).expect("shape");
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::AddScalar(a) => self.accumulate(a, g),
                Op::MulScalar(a, c) => self.accumulate(a, g.scale(c)),
                Op::AddRowBroadcast(a, row) => {
                    // Row gradient is the column sum of the upstream gradient.
                    let cols = g.cols();
                    let mut grow = Matrix::zeros(1, cols);
                    for i in 0..g.rows() {
                        for j in 0..cols {
                            grow.set(0, j, grow.get(0, j) + g.get(i, j));
                        }
                    }
                    self.accumulate(a, g);
                    self.accumulate(row, grow);
                }
                Op::Tanh(a) => {
                    let out_v = &self.values[idx];
                    let d = g.zip_map(out_v, |gi, y| gi * (1.0 - y * y)).expect("shape");
                    self.accumulate(a, d);
                }
                Op::Relu(a) => {
                    // Derivative 0 at the kink.
                    let d = g
                        .zip_map(&self.values[a], |gi, x| if x > 0.0 { gi } else { 0.0 })
                        .expect("shape");
                    self.accumulate(a, d);
                }
                Op::Sigmoid(a) => {
                    let out_v = &self.values[idx];
                    let d = g
                        .zip_map(out_v, |gi, y| gi * y * (1.0 - y))
                        .expect("shape");
                    self.accumulate(a, d);
                }
                Op::Exp(a) => {
                    let d = g.hadamard(&self.values[idx]).expect("shape");
                    self.accumulate(a, d);
                }
                Op::Ln(a) => {
                    let d = g.zip_map(&self.values[a], |gi, x| gi / x).expect("shape");
                    self.accumulate(a, d);
                }
                Op::Abs(a) => {
                    // Subgradient 0 at the kink.
                    let d = g
                        .zip_map(&self.values[a], |gi, x| gi * sign_or_zero(x))
                        .expect("shape");
                    self.accumulate(a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = g
                        .zip_map(&self.values[a], |gi, x| {
                            if x >= lo && x <= hi {
                                gi
                            } else {
                                0.0
                            }
                        })
                        .expect("shape");
                    self.accumulate(a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.values[a].shape();
                    self.accumulate(a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = self.values[a].shape();
                    let v = g.get(0, 0) / (r * c) as f64;
                    self.accumulate(a, Matrix::filled(r, c, v));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.values[a].shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        d.row_mut(i).fill(gi);
                    }
                    self.accumulate(a, d);
                }
                Op::RowMean(a) => {
                    let (r, c) = self.values[a].shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0) / c as f64;
                        d.row_mut(i).fill(gi);
                    }
                    self.accumulate(a, d);
                }
            }
        }
        Ok(())
    }
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Var {
    pub fn value(&self) -> Matrix {
        self.tape.inner.borrow().values[self.idx].clone()
    }

    /// The tape this var is recorded on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.inner.borrow().values[self.idx].shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self) -> Result<f64> {
        self.tape.inner.borrow().values[self.idx].scalar()
    }

    fn same_tape(&self, other: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(Error::config(
                "vars recorded on different tapes cannot be combined",
            ));
        }
        Ok(())
    }

    fn record(&self, value: Matrix, op: Op) -> Var {
        let idx = self.tape.inner.borrow_mut().push(value, op);
        Var {
            tape: self.tape.clone(),
            idx,
        }
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs)?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.values[self.idx].matmul(&inner.values[rhs.idx])?
        };
        Ok(self.record(value, Op::Matmul(self.idx, rhs.idx)))
    }

    pub fn transpose(&self) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].transpose();
        self.record(value, Op::Transpose(self.idx))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs)?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.values[self.idx].add(&inner.values[rhs.idx])?
        };
        Ok(self.record(value, Op::Add(self.idx, rhs.idx)))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs)?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.values[self.idx].sub(&inner.values[rhs.idx])?
        };
        Ok(self.record(value, Op::Sub(self.idx, rhs.idx)))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs)?;
        let value = {
            let inner = self.tape.inner.borrow();
            inner.values[self.idx].hadamard(&inner.values[rhs.idx])?
        };
        Ok(self.record(value, Op::Mul(self.idx, rhs.idx)))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].map(|v| v + c);
        self.record(value, Op::AddScalar(self.idx))
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].scale(c);
        self.record(value, Op::MulScalar(self.idx, c))
    }

    /// Adds a 1 x k row vector to every row of an n x k matrix.
    pub fn add_row_broadcast(&self, row: &Var) -> Result<Var> {
        self.same_tape(row)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let m = &inner.values[self.idx];
            let r = &inner.values[row.idx];
            if r.rows() != 1 || r.cols() != m.cols() {
                return Err(Error::shape(format!(
                    "row broadcast: {}x{} plus {}x{}",
                    m.rows(),
                    m.cols(),
                    r.rows(),
                    r.cols()
                )));
            }
            let mut out = m.clone();
            for i in 0..out.rows() {
                for (o, &b) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.record(value, Op::AddRowBroadcast(self.idx, row.idx)))
    }

    pub fn tanh(&self) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].map(f64::tanh);
        self.record(value, Op::Tanh(self.idx))
    }

    pub fn relu(&self) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].map(|v| v.max(0.0));
        self.record(value, Op::Relu(self.idx))
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].map(|v| 1.0 / (1.0 + (-v).exp()));
        self.record(value, Op::Sigmoid(self.idx))
    }

    pub fn exp(&self) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].map(f64::exp);
        self.record(value, Op::Exp(self.idx))
    }

    /// Natural log; clamp the argument into a safe range first.
    pub fn ln(&self) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].map(f64::ln);
        self.record(value, Op::Ln(self.idx))
    }

    pub fn abs(&self) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].map(f64::abs);
        self.record(value, Op::Abs(self.idx))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.tape.inner.borrow().values[self.idx].map(|v| v.clamp(lo, hi));
        self.record(value, Op::Clamp(self.idx, lo, hi))
    }

    fn reduce_checked(&self, name: &str) -> Result<()> {
        if self.tape.inner.borrow().values[self.idx].is_empty() {
            return Err(Error::shape(format!("{name} of an empty matrix")));
        }
        Ok(())
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&self) -> Result<Var> {
        self.reduce_checked("sum")?;
        let value = Matrix::filled(1, 1, self.tape.inner.borrow().values[self.idx].sum());
        Ok(self.record(value, Op::Sum(self.idx)))
    }

    /// Mean of all entries as a 1x1 node.
    pub fn mean(&self) -> Result<Var> {
        self.reduce_checked("mean")?;
        let value = Matrix::filled(1, 1, self.tape.inner.borrow().values[self.idx].mean());
        Ok(self.record(value, Op::Mean(self.idx)))
    }

    /// Per-row sums as an n x 1 node.
    pub fn row_sum(&self) -> Result<Var> {
        self.reduce_checked("row-sum")?;
        let value = self.tape.inner.borrow().values[self.idx].row_sums();
        Ok(self.record(value, Op::RowSum(self.idx)))
    }

    /// Per-row means as an n x 1 node.
    pub fn row_mean(&self) -> Result<Var> {
        self.reduce_checked("row-mean")?;
        let value = {
            let inner = self.tape.inner.borrow();
            let m = &inner.values[self.idx];
            m.row_sums().scale(1.0 / m.cols() as f64)
        };
        Ok(self.record(value, Op::RowMean(self.idx)))
    }

    /// Reverse pass from this scalar node.
    pub fn backward(&self) -> Result<Gradients> {
        self.tape.inner.borrow_mut().backward_from(self.idx)?;
        Ok(Gradients {
            tape: self.tape.clone(),
        })
    }
}

impl Gradients {
    /// Gradient with respect to `var`; zero matrix if the output does not
    /// depend on it.
    pub fn get(&self, var: &Var) -> Matrix {
        let inner = self.tape.inner.borrow();
        match &inner.grads[var.idx] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = inner.values[var.idx].shape();
                Matrix::zeros(r, c)
            }
        }
    }
}
