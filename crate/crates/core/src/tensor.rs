//! Dense tensors with a define-by-run reverse-mode tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values live inside
//! the tape and are addressed through copyable [`Var`] handles; parameters are
//! registered with [`Tape::param`], constants with [`Tape::constant`].
//! [`Tape::backward`] walks the recorded nodes once in reverse order and
//! returns a [`Gradients`] table. The tape is rebuilt for every forward pass.
//!
//! Only the operations this crate needs are provided; there is no general
//! broadcasting. Every operation checks shapes and rejects non-finite output.

use std::cell::{Ref, RefCell};
use std::f64::consts::{LN_2, PI};
use std::ops::Range;
use std::rc::Rc;

use thiserror::Error;

use crate::sparse::CsrMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("convolution kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("segment {0} has no members")]
    EmptySegment(usize),
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("tape is empty")]
    EmptyTape,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    /// `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// `n x 1` column.
    pub fn column(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len(), 1], data }
    }

    /// `1 x n` row.
    pub fn row(data: Vec<f64>) -> Self {
        Self { shape: vec![1, data.len()], data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `ln(1 + e^x) - ln 2`, zero at the origin.
    ShiftedSoftplus,
    /// `x * sigmoid(x)`.
    Silu,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::ShiftedSoftplus => x.max(0.0) + (-x.abs()).exp().ln_1p() - LN_2,
            Activation::Silu => x * sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::ShiftedSoftplus => sigmoid(x),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Gaussian radial basis with a cosine cutoff window.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialBasis {
    pub centers: Vec<f64>,
    pub gamma: f64,
    pub cutoff: f64,
}

impl RadialBasis {
    /// `count` centers evenly spaced over `[0, cutoff]`, width set by the spacing.
    pub fn evenly_spaced(count: usize, cutoff: f64) -> Self {
        let spacing = if count > 1 { cutoff / (count - 1) as f64 } else { cutoff };
        let centers = (0..count).map(|m| m as f64 * spacing).collect();
        Self { centers, gamma: 0.5 / (spacing * spacing), cutoff }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Cosine window `(cos(pi d / r_c) + 1) / 2`, zero beyond the cutoff.
    pub fn window(&self, d: f64) -> f64 {
        if d >= self.cutoff {
            0.0
        } else {
            0.5 * ((PI * d / self.cutoff).cos() + 1.0)
        }
    }

    fn window_derivative(&self, d: f64) -> f64 {
        if d >= self.cutoff {
            0.0
        } else {
            -0.5 * PI / self.cutoff * (PI * d / self.cutoff).sin()
        }
    }

    /// Windowed basis values at distance `d`.
    pub fn expand(&self, d: f64) -> Vec<f64> {
        let w = self.window(d);
        self.centers.iter().map(|c| (-self.gamma * (d - c).powi(2)).exp() * w).collect()
    }

    /// Derivatives of [`RadialBasis::expand`] with respect to `d`.
    pub fn expand_derivative(&self, d: f64) -> Vec<f64> {
        let w = self.window(d);
        let dw = self.window_derivative(d);
        self.centers
            .iter()
            .map(|c| {
                let g = (-self.gamma * (d - c).powi(2)).exp();
                g * (-2.0 * self.gamma * (d - c)) * w + g * dw
            })
            .collect()
    }
}

/// Dense row-major blocks stacked along the node dimension.
///
/// Block `g` occupies rows `offset..offset + rows` and multiplies the first
/// `cols` entries of row `g` of a coefficient matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlock {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockColumns {
    pub blocks: Vec<DenseBlock>,
    pub total_rows: usize,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulColumn(Var, Var),
    Act(Var, Activation),
    Abs(Var),
    Powf(Var, f64),
    Transpose(Var),
    Sum(Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    RowNorm(Var),
    Conv1d { h: Var, kernel: Var, segments: Rc<[Range<usize>]> },
    SegmentMean { x: Var, index: Rc<[usize]>, counts: Rc<[usize]> },
    SegmentNorm { x: Var, index: Rc<[usize]> },
    SparseMatMul(Var, Rc<CsrMatrix>),
    BlockExpand(Var, Rc<BlockColumns>),
    Rbf(Var, Rc<RadialBasis>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Define-by-run recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, with zeros when it does not influence the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(TensorError::ShapeMismatch { op, left: t.shape.clone(), right: vec![0, 0] });
    }
    Ok((t.shape[0], t.shape[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch { op, left: a.shape.clone(), right: b.shape.clone() });
    }
    Ok(())
}

fn check_index(op: &'static str, idx: &[usize], len: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= len) {
        Some(&index) => Err(TensorError::IndexOutOfRange { op, index, len }),
        None => Ok(()),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * q];
    for i in 0..m {
        let row = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * q..(k + 1) * q];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a^T b` for row-major `a: m x p`, `b: m x q`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..m {
        let brow = &b[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * q..(k + 1) * q];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a b^T` for row-major `a: m x q`, `b: p x q`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, q: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let arow = &a[i * q..(i + 1) * q];
        for k in 0..p {
            let brow = &b[k * q..(k + 1) * q];
            out[i * p + k] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the value behind `v`.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |inner| &inner.nodes[v.0].value)
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        inner.nodes.push(Node { value, requires_grad, op });
        Ok(Var(inner.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.nodes[v.0].requires_grad)
    }

    /// Records a value that is not differentiated.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Records a trainable value; its gradient is reported by `backward`.
    pub fn param(&self, value: Tensor) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            let (m, p) = expect_2d("matmul", &ta)?;
            let (p2, q) = expect_2d("matmul", &tb)?;
            if p != p2 {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: ta.shape.clone(),
                    right: tb.shape.clone(),
                });
            }
            Tensor { shape: vec![m, q], data: matmul_raw(&ta.data, &tb.data, m, p, q) }
        };
        self.push("matmul", out, Op::MatMul(a, b), self.any_grad(&[a, b]))
    }

    fn zip_op(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            same_shape(name, &ta, &tb)?;
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect(),
            }
        };
        self.push(name, out, op, self.any_grad(&[a, b]))
    }

    fn map_op(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| f(*x)).collect() }
        };
        self.push(name, out, op, self.any_grad(&[a]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.map_op("scale", a, |x| c * x, Op::Scale(a, c))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let (tx, tb) = (self.value(x), self.value(bias));
            let (m, n) = expect_2d("add_bias", &tx)?;
            if tb.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    left: tx.shape.clone(),
                    right: tb.shape.clone(),
                });
            }
            let mut data = tx.data.clone();
            for i in 0..m {
                for (o, b) in data[i * n..(i + 1) * n].iter_mut().zip(&tb.data) {
                    *o += b;
                }
            }
            Tensor { shape: vec![m, n], data }
        };
        self.push("add_bias", out, Op::AddBias(x, bias), self.any_grad(&[x, bias]))
    }

    /// Scales row `i` of an `m x n` matrix by `c[i]` for an `m x 1` column `c`.
    pub fn mul_column(&self, x: Var, c: Var) -> Result<Var> {
        let out = {
            let (tx, tc) = (self.value(x), self.value(c));
            let (m, n) = expect_2d("mul_column", &tx)?;
            if tc.len() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "mul_column",
                    left: tx.shape.clone(),
                    right: tc.shape.clone(),
                });
            }
            let mut data = tx.data.clone();
            for i in 0..m {
                let s = tc.data[i];
                data[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= s);
            }
            Tensor { shape: vec![m, n], data }
        };
        self.push("mul_column", out, Op::MulColumn(x, c), self.any_grad(&[x, c]))
    }

    pub fn activation(&self, x: Var, kind: Activation) -> Result<Var> {
        self.map_op("activation", x, |v| kind.apply(v), Op::Act(x, kind))
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self, x: Var) -> Result<Var> {
        self.map_op("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn powf(&self, x: Var, p: f64) -> Result<Var> {
        self.map_op("powf", x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let (m, n) = expect_2d("transpose", &tx)?;
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = tx.data[i * n + j];
                }
            }
            Tensor { shape: vec![n, m], data }
        };
        self.push("transpose", out, Op::Transpose(x), self.any_grad(&[x]))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), self.any_grad(&[x]))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `out[e] = x[idx[e]]` row-wise.
    pub fn gather_rows(&self, x: Var, idx: Rc<[usize]>) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let (m, n) = expect_2d("gather_rows", &tx)?;
            check_index("gather_rows", &idx, m)?;
            let mut data = Vec::with_capacity(idx.len() * n);
            for &i in idx.iter() {
                data.extend_from_slice(&tx.data[i * n..(i + 1) * n]);
            }
            Tensor { shape: vec![idx.len(), n], data }
        };
        self.push("gather_rows", out, Op::GatherRows(x, idx), self.any_grad(&[x]))
    }

    /// `out[idx[e]] += x[e]` row-wise into `rows` output rows.
    pub fn scatter_add_rows(&self, x: Var, idx: Rc<[usize]>, rows: usize) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let (m, n) = expect_2d("scatter_add_rows", &tx)?;
            if idx.len() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "scatter_add_rows",
                    left: tx.shape.clone(),
                    right: vec![idx.len()],
                });
            }
            check_index("scatter_add_rows", &idx, rows)?;
            let mut data = vec![0.0; rows * n];
            for (e, &i) in idx.iter().enumerate() {
                for (o, v) in data[i * n..(i + 1) * n].iter_mut().zip(&tx.data[e * n..(e + 1) * n]) {
                    *o += v;
                }
            }
            Tensor { shape: vec![rows, n], data }
        };
        self.push("scatter_add_rows", out, Op::ScatterAddRows(x, idx.clone()), self.any_grad(&[x]))
    }

    /// Euclidean norm of each row, as an `m x 1` column.
    pub fn row_norm(&self, x: Var) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let (m, n) = expect_2d("row_norm", &tx)?;
            let data =
                (0..m).map(|i| tx.data[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            Tensor { shape: vec![m, 1], data }
        };
        self.push("row_norm", out, Op::RowNorm(x), self.any_grad(&[x]))
    }

    /// Cross-correlation along the node axis with zero padding.
    ///
    /// `h: n x C_in`, `kernel: K x C_in x C_out` with `K` odd. Padding is applied
    /// at the boundary of every segment, so nodes of different graphs in a batch
    /// never see each other. `K = 1` is a per-node linear map.
    pub fn conv1d_nodes(&self, h: Var, kernel: Var, segments: Rc<[Range<usize>]>) -> Result<Var> {
        let out = {
            let (th, tk) = (self.value(h), self.value(kernel));
            let (n, cin) = expect_2d("conv1d_nodes", &th)?;
            if tk.shape.len() != 3 || tk.shape[1] != cin {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d_nodes",
                    left: th.shape.clone(),
                    right: tk.shape.clone(),
                });
            }
            let (ks, cout) = (tk.shape[0], tk.shape[2]);
            if ks % 2 == 0 {
                return Err(TensorError::EvenKernel(ks));
            }
            check_segments(&segments, n)?;
            let half = ks / 2;
            let mut data = vec![0.0; n * cout];
            for seg in segments.iter() {
                for v in seg.clone() {
                    let orow = &mut data[v * cout..(v + 1) * cout];
                    for t in 0..ks {
                        let Some(src) = (v + t).checked_sub(half) else { continue };
                        if src < seg.start || src >= seg.end {
                            continue;
                        }
                        let hrow = &th.data[src * cin..(src + 1) * cin];
                        let kt = &tk.data[t * cin * cout..(t + 1) * cin * cout];
                        for (c, &hv) in hrow.iter().enumerate() {
                            if hv == 0.0 {
                                continue;
                            }
                            for (o, kv) in orow.iter_mut().zip(&kt[c * cout..(c + 1) * cout]) {
                                *o += hv * kv;
                            }
                        }
                    }
                }
            }
            Tensor { shape: vec![n, cout], data }
        };
        self.push("conv1d_nodes", out, Op::Conv1d { h, kernel, segments }, self.any_grad(&[h, kernel]))
    }

    /// Mean of the rows belonging to each group; `index[v]` is the group of row `v`.
    pub fn segment_mean(&self, x: Var, index: Rc<[usize]>, groups: usize) -> Result<Var> {
        let (out, counts) = {
            let tx = self.value(x);
            let (m, n) = expect_2d("segment_mean", &tx)?;
            if index.len() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "segment_mean",
                    left: tx.shape.clone(),
                    right: vec![index.len()],
                });
            }
            check_index("segment_mean", &index, groups)?;
            let mut counts = vec![0usize; groups];
            for &g in index.iter() {
                counts[g] += 1;
            }
            if let Some(g) = counts.iter().position(|&c| c == 0) {
                return Err(TensorError::EmptySegment(g));
            }
            let mut data = vec![0.0; groups * n];
            for (v, &g) in index.iter().enumerate() {
                for (o, x) in data[g * n..(g + 1) * n].iter_mut().zip(&tx.data[v * n..(v + 1) * n]) {
                    *o += x;
                }
            }
            for g in 0..groups {
                let c = counts[g] as f64;
                data[g * n..(g + 1) * n].iter_mut().for_each(|v| *v /= c);
            }
            (Tensor { shape: vec![groups, n], data }, counts)
        };
        self.push(
            "segment_mean",
            out,
            Op::SegmentMean { x, index, counts: counts.into() },
            self.any_grad(&[x]),
        )
    }

    /// Euclidean norm of all entries in each group of rows, as `groups x 1`.
    pub fn segment_norm(&self, x: Var, index: Rc<[usize]>, groups: usize) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let (m, n) = expect_2d("segment_norm", &tx)?;
            if index.len() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "segment_norm",
                    left: tx.shape.clone(),
                    right: vec![index.len()],
                });
            }
            check_index("segment_norm", &index, groups)?;
            let mut sq = vec![0.0; groups];
            for (v, &g) in index.iter().enumerate() {
                sq[g] += tx.data[v * n..(v + 1) * n].iter().map(|x| x * x).sum::<f64>();
            }
            Tensor { shape: vec![groups, 1], data: sq.into_iter().map(f64::sqrt).collect() }
        };
        self.push("segment_norm", out, Op::SegmentNorm { x, index }, self.any_grad(&[x]))
    }

    /// `A x` for a constant sparse matrix `A` and `x: n x c`.
    pub fn sparse_matmul(&self, matrix: Rc<CsrMatrix>, x: Var) -> Result<Var> {
        let out = {
            let tx = self.value(x);
            let (m, c) = expect_2d("sparse_matmul", &tx)?;
            if m != matrix.dim() {
                return Err(TensorError::ShapeMismatch {
                    op: "sparse_matmul",
                    left: vec![matrix.dim(), matrix.dim()],
                    right: tx.shape.clone(),
                });
            }
            Tensor { shape: vec![m, c], data: matrix.matmat(&tx.data, c) }
        };
        self.push("sparse_matmul", out, Op::SparseMatMul(x, matrix), self.any_grad(&[x]))
    }

    /// Expands per-group coefficients through constant dense blocks:
    /// `out[offset_g + v] = sum_i B_g[v, i] * alpha[g, i]`, giving a `total_rows x 1` column.
    pub fn block_expand(&self, alpha: Var, blocks: Rc<BlockColumns>) -> Result<Var> {
        let out = {
            let ta = self.value(alpha);
            let (g_count, k) = expect_2d("block_expand", &ta)?;
            if blocks.blocks.len() != g_count || blocks.blocks.iter().any(|b| b.cols > k) {
                return Err(TensorError::ShapeMismatch {
                    op: "block_expand",
                    left: ta.shape.clone(),
                    right: vec![blocks.blocks.len(), blocks.blocks.iter().map(|b| b.cols).max().unwrap_or(0)],
                });
            }
            let mut data = vec![0.0; blocks.total_rows];
            for (g, b) in blocks.blocks.iter().enumerate() {
                let coeffs = &ta.data[g * k..g * k + b.cols];
                for v in 0..b.rows {
                    data[b.offset + v] =
                        b.data[v * b.cols..(v + 1) * b.cols].iter().zip(coeffs).map(|(u, a)| u * a).sum();
                }
            }
            Tensor { shape: vec![blocks.total_rows, 1], data }
        };
        self.push("block_expand", out, Op::BlockExpand(alpha, blocks), self.any_grad(&[alpha]))
    }

    /// Radial basis expansion of an `m x 1` distance column into `m x n_rbf`.
    pub fn rbf_expand(&self, d: Var, basis: Rc<RadialBasis>) -> Result<Var> {
        let out = {
            let td = self.value(d);
            let (m, one) = expect_2d("rbf_expand", &td)?;
            if one != 1 {
                return Err(TensorError::ShapeMismatch { op: "rbf_expand", left: td.shape.clone(), right: vec![m, 1] });
            }
            let mut data = Vec::with_capacity(m * basis.len());
            for &dv in &td.data {
                data.extend(basis.expand(dv));
            }
            Tensor { shape: vec![m, basis.len()], data }
        };
        self.push("rbf_expand", out, Op::Rbf(d, basis), self.any_grad(&[d]))
    }

    /// Reverse pass from a scalar `loss`. A tape may be differentiated once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if inner.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(inner.nodes[loss.0].value.shape.clone()));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&nodes[loss.0].value.shape, 1.0));

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn check_segments(segments: &[Range<usize>], n: usize) -> Result<()> {
    for s in segments {
        if s.start > s.end || s.end > n {
            return Err(TensorError::IndexOutOfRange { op: "conv1d_nodes", index: s.end, len: n });
        }
    }
    Ok(())
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let wants = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, p, q) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            if wants(*a) {
                let ga = matmul_nt(&g.data, &tb.data, m, q, p);
                accumulate(nodes, grads, *a, Tensor { shape: vec![m, p], data: ga });
            }
            if wants(*b) {
                let gb = matmul_tn(&ta.data, &g.data, m, p, q);
                accumulate(nodes, grads, *b, Tensor { shape: vec![p, q], data: gb });
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if wants(*b) {
                let neg = g.data.iter().map(|v| -v).collect();
                accumulate(nodes, grads, *b, Tensor { shape: g.shape.clone(), data: neg });
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if wants(*a) {
                let d = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *a, Tensor { shape: g.shape.clone(), data: d });
            }
            if wants(*b) {
                let d = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *b, Tensor { shape: g.shape.clone(), data: d });
            }
        }
        Op::Scale(a, c) => {
            let d = g.data.iter().map(|v| c * v).collect();
            accumulate(nodes, grads, *a, Tensor { shape: g.shape.clone(), data: d });
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, g.clone());
            if wants(*b) {
                let (m, n) = (g.shape[0], g.shape[1]);
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    for (o, v) in gb.iter_mut().zip(&g.data[r * n..(r + 1) * n]) {
                        *o += v;
                    }
                }
                let shape = val(*b).shape.clone();
                accumulate(nodes, grads, *b, Tensor { shape, data: gb });
            }
        }
        Op::MulColumn(x, c) => {
            let (tx, tc) = (val(*x), val(*c));
            let (m, n) = (tx.shape[0], tx.shape[1]);
            if wants(*x) {
                let mut gx = g.data.clone();
                for r in 0..m {
                    gx[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= tc.data[r]);
                }
                accumulate(nodes, grads, *x, Tensor { shape: tx.shape.clone(), data: gx });
            }
            if wants(*c) {
                let gc = (0..m)
                    .map(|r| g.data[r * n..(r + 1) * n].iter().zip(&tx.data[r * n..(r + 1) * n]).map(|(a, b)| a * b).sum())
                    .collect();
                accumulate(nodes, grads, *c, Tensor { shape: tc.shape.clone(), data: gc });
            }
        }
        Op::Act(x, kind) => {
            let tx = val(*x);
            let d = g.data.iter().zip(&tx.data).map(|(gv, xv)| gv * kind.derivative(*xv)).collect();
            accumulate(nodes, grads, *x, Tensor { shape: g.shape.clone(), data: d });
        }
        Op::Abs(x) => {
            let tx = val(*x);
            let d = g
                .data
                .iter()
                .zip(&tx.data)
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else if *xv < 0.0 { -gv } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, Tensor { shape: g.shape.clone(), data: d });
        }
        Op::Powf(x, p) => {
            let tx = val(*x);
            let d = g.data.iter().zip(&tx.data).map(|(gv, xv)| gv * p * xv.powf(p - 1.0)).collect();
            accumulate(nodes, grads, *x, Tensor { shape: g.shape.clone(), data: d });
        }
        Op::Transpose(x) => {
            let (m, n) = (g.shape[0], g.shape[1]);
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    d[c * m + r] = g.data[r * n + c];
                }
            }
            accumulate(nodes, grads, *x, Tensor { shape: vec![n, m], data: d });
        }
        Op::Sum(x) => {
            let shape = val(*x).shape.clone();
            accumulate(nodes, grads, *x, Tensor::filled(&shape, g.data[0]));
        }
        Op::GatherRows(x, idx) => {
            let tx = val(*x);
            let n = tx.shape[1];
            let mut d = vec![0.0; tx.len()];
            for (e, &r) in idx.iter().enumerate() {
                for (o, v) in d[r * n..(r + 1) * n].iter_mut().zip(&g.data[e * n..(e + 1) * n]) {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *x, Tensor { shape: tx.shape.clone(), data: d });
        }
        Op::ScatterAddRows(x, idx) => {
            let n = g.shape[1];
            let mut d = Vec::with_capacity(idx.len() * n);
            for &r in idx.iter() {
                d.extend_from_slice(&g.data[r * n..(r + 1) * n]);
            }
            accumulate(nodes, grads, *x, Tensor { shape: vec![idx.len(), n], data: d });
        }
        Op::RowNorm(x) => {
            let tx = val(*x);
            let (m, n) = (tx.shape[0], tx.shape[1]);
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                let norm = out.data[r];
                if norm == 0.0 {
                    continue;
                }
                let s = g.data[r] / norm;
                for c in 0..n {
                    d[r * n + c] = s * tx.data[r * n + c];
                }
            }
            accumulate(nodes, grads, *x, Tensor { shape: tx.shape.clone(), data: d });
        }
        Op::Conv1d { h, kernel, segments } => {
            let (th, tk) = (val(*h), val(*kernel));
            let (cin, ks, cout) = (th.shape[1], tk.shape[0], tk.shape[2]);
            let half = ks / 2;
            let mut gh = if wants(*h) { Some(vec![0.0; th.len()]) } else { None };
            let mut gk = if wants(*kernel) { Some(vec![0.0; tk.len()]) } else { None };
            for seg in segments.iter() {
                for v in seg.clone() {
                    let grow = &g.data[v * cout..(v + 1) * cout];
                    for t in 0..ks {
                        let Some(src) = (v + t).checked_sub(half) else { continue };
                        if src < seg.start || src >= seg.end {
                            continue;
                        }
                        let kt = t * cin * cout;
                        for c in 0..cin {
                            let kslice = &tk.data[kt + c * cout..kt + (c + 1) * cout];
                            if let Some(gh) = gh.as_mut() {
                                gh[src * cin + c] += grow.iter().zip(kslice).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gk) = gk.as_mut() {
                                let hv = th.data[src * cin + c];
                                if hv != 0.0 {
                                    for (o, gv) in gk[kt + c * cout..kt + (c + 1) * cout].iter_mut().zip(grow) {
                                        *o += hv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(d) = gh {
                accumulate(nodes, grads, *h, Tensor { shape: th.shape.clone(), data: d });
            }
            if let Some(d) = gk {
                accumulate(nodes, grads, *kernel, Tensor { shape: tk.shape.clone(), data: d });
            }
        }
        Op::SegmentMean { x, index, counts } => {
            let tx = val(*x);
            let n = tx.shape[1];
            let mut d = vec![0.0; tx.len()];
            for (v, &grp) in index.iter().enumerate() {
                let c = counts[grp] as f64;
                for (o, gv) in d[v * n..(v + 1) * n].iter_mut().zip(&g.data[grp * n..(grp + 1) * n]) {
                    *o = gv / c;
                }
            }
            accumulate(nodes, grads, *x, Tensor { shape: tx.shape.clone(), data: d });
        }
        Op::SegmentNorm { x, index } => {
            let tx = val(*x);
            let n = tx.shape[1];
            let mut d = vec![0.0; tx.len()];
            for (v, &grp) in index.iter().enumerate() {
                let norm = out.data[grp];
                if norm == 0.0 {
                    continue;
                }
                let s = g.data[grp] / norm;
                for c in 0..n {
                    d[v * n + c] = s * tx.data[v * n + c];
                }
            }
            accumulate(nodes, grads, *x, Tensor { shape: tx.shape.clone(), data: d });
        }
        Op::SparseMatMul(x, a) => {
            // A is applied as A^T in reverse; transpose is taken entrywise.
            let c = g.shape[1];
            let mut d = vec![0.0; g.len()];
            for r in 0..a.dim() {
                for (col, v) in a.row(r) {
                    for j in 0..c {
                        d[col * c + j] += v * g.data[r * c + j];
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor { shape: g.shape.clone(), data: d });
        }
        Op::BlockExpand(alpha, blocks) => {
            let ta = val(*alpha);
            let k = ta.shape[1];
            let mut d = vec![0.0; ta.len()];
            for (grp, b) in blocks.blocks.iter().enumerate() {
                for v in 0..b.rows {
                    let gv = g.data[b.offset + v];
                    for i in 0..b.cols {
                        d[grp * k + i] += b.data[v * b.cols + i] * gv;
                    }
                }
            }
            accumulate(nodes, grads, *alpha, Tensor { shape: ta.shape.clone(), data: d });
        }
        Op::Rbf(dvar, basis) => {
            let td = val(*dvar);
            let nb = basis.len();
            let d = td
                .data
                .iter()
                .enumerate()
                .map(|(e, &dist)| {
                    basis.expand_derivative(dist).iter().zip(&g.data[e * nb..(e + 1) * nb]).map(|(a, b)| a * b).sum()
                })
                .collect();
            accumulate(nodes, grads, *dvar, Tensor { shape: td.shape.clone(), data: d });
        }
    }
}
