//! Dense row-major `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Tape`] records every operation executed through it. Values of
//! intermediate results stay on the tape so that [`Tape::backward`] can walk
//! the records in exact reverse order. Tensors outside a tape are plain
//! values that may carry an accumulated gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {len}")));
    }
    Ok(())
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        check_finite(&data, "tensor construction")?;
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[1], vec![value])
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn is_grad_enabled(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values; callers keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Handle to a value recorded on a [`Tape`].
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Pow(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    AddRowBias(Var, Var),
    MulColGain(Var, Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, index: Vec<Option<usize>> },
    Reshape(Var),
    AvgPool { x: Var, width: usize, height: usize, channels: usize, patch: usize },
    FieldWeights { lambda: Var, exponent: Vec<f64> },
    FocalLoss { logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape(format!("expected a matrix, got shape {other:?}"))),
    }
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`.
fn gemm_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`.
fn gemm_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + math::ln(1.0 + math::exp(-x))
    } else {
        math::ln(1.0 + math::exp(x))
    }
}

/// Natural log below which focal-loss log terms are clamped (`ln 1e-12`).
const LOG_CLAMP: f64 = -27.631021115928547;

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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        check_shape(shape, data.len())?;
        self.push(shape.to_vec(), data, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor { shape: n.shape.clone(), data: n.value.clone(), requires_grad: false, grad: None }
    }

    /// Gradient of the loss with respect to `v`, after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(a))?;
        let (k2, n) = rows_cols(self.shape(b))?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions {k} and {k2}")));
        }
        let out = gemm(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a))?;
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(vec![n, m], out, Op::Transpose(a), rg, "transpose")
    }

    fn binary_shape(&self, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::Shape(format!("{op} of {sa:?} and {sb:?}")))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() == y.len() {
            x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect()
        } else if y.len() == 1 {
            x.iter().map(|p| f(*p, y[0])).collect()
        } else {
            y.iter().map(|q| f(x[0], *q)).collect()
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "add")?;
        let out = self.zip_broadcast(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "sub")?;
        let out = self.zip_broadcast(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Sub(a, b), rg, "sub")
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "mul")?;
        let out = self.zip_broadcast(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        self.push(shape, out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v * s).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(shape, out, Op::Scale(a, s), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v + s).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(shape, out, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|v| math::exp(*v)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(shape, out, Op::Exp(a), rg, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|v| *v <= 0.0) {
            return Err(Error::LogDomain);
        }
        let out = self.value(a).iter().map(|v| math::ln(*v)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(shape, out, Op::Log(a), rg, "log")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|v| -v).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(shape, out, Op::Neg(a), rg, "neg")
    }

    /// Elementwise `a^p`.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| math::powf(*v, p)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(shape, out, Op::Pow(a, p), rg, "pow")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v.max(0.0)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(shape, out, Op::Relu(a), rg, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|v| sigmoid(*v)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(&[a]));
        self.push(shape, out, Op::Sigmoid(a), rg, "sigmoid")
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a))?;
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (ov, xv) in o.iter_mut().zip(row) {
                *ov = math::exp(xv - max);
                sum += *ov;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(&[a]);
        self.push(vec![m, n], out, Op::SoftmaxRows(a), rg, "softmax_rows")
    }

    /// Softmax where `excluded[i*n + j]` entries receive weight exactly zero.
    /// A row with every entry excluded yields all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, excluded: Vec<bool>) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(a))?;
        if excluded.len() != m * n {
            return Err(Error::Shape(format!("mask of length {} for {m}x{n}", excluded.len())));
        }
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mask = &excluded[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &e)| !e)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for ((ov, xv), &e) in o.iter_mut().zip(row).zip(mask) {
                if !e {
                    *ov = math::exp(xv - max);
                    sum += *ov;
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.rg(&[a]);
        self.push(vec![m, n], out, Op::MaskedSoftmaxRows(a), rg, "masked_softmax_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Mean(a), rg, "mean")
    }

    /// `x[m×n] + b` with `b` of length `n` added to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x))?;
        if self.value(b).len() != n {
            return Err(Error::Shape(format!("bias of length {} for {n} columns", self.value(b).len())));
        }
        let (xv, bv) = (self.value(x), self.value(b));
        let out = (0..m * n).map(|i| xv[i] + bv[i % n]).collect();
        let rg = self.rg(&[x, b]);
        self.push(vec![m, n], out, Op::AddRowBias(x, b), rg, "add_row_bias")
    }

    /// `x[m×n]` with column `j` multiplied by `g[j]`.
    pub fn mul_col_gain(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x))?;
        if self.value(g).len() != n {
            return Err(Error::Shape(format!("gain of length {} for {n} columns", self.value(g).len())));
        }
        let (xv, gv) = (self.value(x), self.value(g));
        let out = (0..m * n).map(|i| xv[i] * gv[i % n]).collect();
        let rg = self.rg(&[x, g]);
        self.push(vec![m, n], out, Op::MulColGain(x, g), rg, "mul_col_gain")
    }

    /// Normalizes every row to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x))?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / math::sqrt(var + eps);
            inv_std[i] = r;
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * r;
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![m, n], out, Op::LayerNormRows { x, inv_std }, rg, "layer_norm_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x))?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!("columns {start}..{} of {n}", start + len)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(vec![m, len], out, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (m, _) = rows_cols(self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p))?;
            if r != m {
                return Err(Error::Shape(format!("concat_cols rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, n) = rows_cols(self.shape(first))?;
        let mut m = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p))?;
            if c != n {
                return Err(Error::Shape(format!("concat_rows cols {c} vs {n}")));
            }
            m += r;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    /// Output row `r` is input row `index[r]`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x))?;
        if let Some(bad) = index.iter().flatten().find(|&&r| r >= m) {
            return Err(Error::Shape(format!("gather row {bad} of {m}")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; index.len() * n];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = src {
                out[r * n..(r + 1) * n].copy_from_slice(&xv[s * n..(s + 1) * n]);
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![index.len(), n], out, Op::GatherRows { x, index }, rg, "gather_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape, self.value(x).len())?;
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape.to_vec(), out, Op::Reshape(x), rg, "reshape")
    }

    /// Non-overlapping `patch × patch` average pooling of an `[height, width,
    /// channels]` image into a `[(height/patch)·(width/patch), channels]`
    /// matrix whose rows enumerate output pixels row-major.
    pub fn avg_pool(&mut self, x: Var, patch: usize) -> Result<Var> {
        let (height, width, channels) = match self.shape(x) {
            [h, w, c] => (*h, *w, *c),
            other => return Err(Error::Shape(format!("avg_pool needs [h, w, c], got {other:?}"))),
        };
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Shape(format!("{width}x{height} image not divisible by patch {patch}")));
        }
        let (ow, oh) = (width / patch, height / patch);
        let xv = self.value(x);
        let mut out = vec![0.0; ow * oh * channels];
        let norm = 1.0 / (patch * patch) as f64;
        for y in 0..height {
            for xx in 0..width {
                let o = ((y / patch) * ow + xx / patch) * channels;
                let src = (y * width + xx) * channels;
                for c in 0..channels {
                    out[o + c] += xv[src + c] * norm;
                }
            }
        }
        let rg = self.rg(&[x]);
        let op = Op::AvgPool { x, width, height, channels, patch };
        self.push(vec![ow * oh, channels], out, op, rg, "avg_pool")
    }

    /// Attention-field weights `exp(-λ² a)` for rows marked visible, zero
    /// otherwise. `lambda` is a scalar; gradients flow into it.
    pub fn field_weights(
        &mut self,
        lambda: Var,
        shape: [usize; 2],
        exponent: Vec<f64>,
        row_visible: Vec<bool>,
    ) -> Result<Var> {
        if self.value(lambda).len() != 1 {
            return Err(Error::Shape("lambda must be a scalar".into()));
        }
        let [m, n] = shape;
        if exponent.len() != m * n || row_visible.len() != m {
            return Err(Error::Shape(format!("field exponent for {m}x{n}")));
        }
        let l2 = self.value(lambda)[0] * self.value(lambda)[0];
        let mut out = vec![0.0; m * n];
        for (i, &vis) in row_visible.iter().enumerate() {
            if vis {
                for j in 0..n {
                    out[i * n + j] = math::exp(-l2 * exponent[i * n + j]);
                }
            }
        }
        let rg = self.rg(&[lambda]);
        let op = Op::FieldWeights { lambda, exponent };
        self.push(vec![m, n], out, op, rg, "field_weights")
    }

    /// Mean binary focal loss of `logits` against 0/1 `targets`.
    pub fn focal_loss(&mut self, logits: Var, targets: Vec<f64>, alpha: f64, gamma: f64) -> Result<Var> {
        let z = self.value(logits);
        if targets.len() != z.len() {
            return Err(Error::Shape(format!("{} targets for {} logits", targets.len(), z.len())));
        }
        if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidConfig("focal loss targets must be 0 or 1".into()));
        }
        let mut total = 0.0;
        for (&zv, &t) in z.iter().zip(&targets) {
            let s = if t == 1.0 { zv } else { -zv };
            let alpha_t = if t == 1.0 { alpha } else { 1.0 - alpha };
            let log_pt = (-softplus(-s)).max(LOG_CLAMP);
            let one_minus = sigmoid(-s);
            total += -alpha_t * math::powf(one_minus, gamma) * log_pt;
        }
        let out = total / z.len() as f64;
        let rg = self.rg(&[logits]);
        let op = Op::FocalLoss { logits, targets, alpha, gamma };
        self.push(vec![1], vec![out], op, rg, "focal_loss")
    }

    /// Reverse pass from a scalar `loss`. Afterwards every leaf that requires
    /// gradients has one (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let n = self.node(loss).value.len();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.as_slice();
        let dims = |v: Var| nodes[v.0].shape.as_slice();

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (dims(*a)[0], dims(*a)[1]);
                let n = dims(*b)[1];
                acc(*a, &mut |s| {
                    let d = gemm_a_bt(g, val(*b), m, n, k);
                    s.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                });
                acc(*b, &mut |s| {
                    let d = gemm_at_b(val(*a), g, m, k, n);
                    s.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (dims(*a)[0], dims(*a)[1]);
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |s| reduce_into(s, g, 1.0));
                acc(*b, &mut |s| reduce_into(s, g, sign));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &mut |s| mul_grad_into(s, g, y));
                acc(*b, &mut |s| mul_grad_into(s, g, x));
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, gv)| *x += c * gv)),
            Op::AddScalar(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, gv)| *x += gv)),
            Op::Neg(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, gv)| *x -= gv)),
            Op::Exp(a) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).zip(out).for_each(|((x, gv), o)| *x += gv * o)
            }),
            Op::Log(a) => {
                let xv = val(*a);
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(xv).for_each(|((x, gv), v)| *x += gv / v))
            }
            Op::Pow(a, p) => {
                let xv = val(*a);
                acc(*a, &mut |s| {
                    s.iter_mut()
                        .zip(g)
                        .zip(xv)
                        .for_each(|((x, gv), v)| *x += gv * p * math::powf(*v, p - 1.0))
                })
            }
            Op::Relu(a) => {
                let xv = val(*a);
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(xv).for_each(|((x, gv), v)| {
                        if *v > 0.0 {
                            *x += gv
                        }
                    })
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).zip(out).for_each(|((x, gv), o)| *x += gv * o * (1.0 - o))
            }),
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let n = dims(*a)[1];
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((x, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (gv - dot);
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n))
            }
            Op::AddRowBias(x, b) => {
                let n = dims(*x)[1];
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                acc(*b, &mut |s| {
                    for row in g.chunks(n) {
                        s.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                });
            }
            Op::MulColGain(x, gain) => {
                let n = dims(*x)[1];
                let (xv, gv) = (val(*x), val(*gain));
                acc(*x, &mut |s| {
                    for (i, p) in s.iter_mut().enumerate() {
                        *p += g[i] * gv[i % n];
                    }
                });
                acc(*gain, &mut |s| {
                    for (i, q) in g.iter().enumerate() {
                        s[i % n] += q * xv[i];
                    }
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = dims(*x)[1];
                let nf = n as f64;
                acc(*x, &mut |s| {
                    for (r, ((srow, grow), yrow)) in
                        s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)).enumerate()
                    {
                        let gsum: f64 = grow.iter().sum();
                        let gy: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((p, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *p += inv_std[r] / nf * (nf * gv - gsum - y * gy);
                        }
                    }
                })
            }
            Op::SliceCols { x, start } => {
                let n = dims(*x)[1];
                let len = nodes[idx].shape[1];
                acc(*x, &mut |s| {
                    for (i, grow) in g.chunks(len).enumerate() {
                        s[i * n + start..i * n + start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(p, q)| *p += q);
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let n = nodes[idx].shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = dims(*p)[1];
                    acc(*p, &mut |s| {
                        for (i, srow) in s.chunks_mut(w).enumerate() {
                            srow.iter_mut()
                                .zip(&g[i * n + offset..i * n + offset + w])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    acc(*p, &mut |s| {
                        s.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b)
                    });
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                let n = dims(*x)[1];
                acc(*x, &mut |s| {
                    for (r, src) in index.iter().enumerate() {
                        if let Some(src) = src {
                            s[src * n..(src + 1) * n]
                                .iter_mut()
                                .zip(&g[r * n..(r + 1) * n])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                })
            }
            Op::Reshape(x) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            Op::AvgPool { x, width, height, channels, patch } => {
                let (width, height, channels, patch) = (*width, *height, *channels, *patch);
                let ow = width / patch;
                let norm = 1.0 / (patch * patch) as f64;
                acc(*x, &mut |s| {
                    for y in 0..height {
                        for xx in 0..width {
                            let o = ((y / patch) * ow + xx / patch) * channels;
                            let dst = (y * width + xx) * channels;
                            for c in 0..channels {
                                s[dst + c] += g[o + c] * norm;
                            }
                        }
                    }
                })
            }
            Op::FieldWeights { lambda, exponent } => {
                let l = val(*lambda)[0];
                acc(*lambda, &mut |s| {
                    let d: f64 = g
                        .iter()
                        .zip(out)
                        .zip(exponent)
                        .map(|((gv, w), a)| gv * w * (-2.0 * l * a))
                        .sum();
                    s[0] += d;
                })
            }
            Op::FocalLoss { logits, targets, alpha, gamma } => {
                let z = val(*logits);
                let scale = g[0] / z.len() as f64;
                acc(*logits, &mut |s| {
                    for ((p, &zv), &t) in s.iter_mut().zip(z).zip(targets) {
                        let sign = if t == 1.0 { 1.0 } else { -1.0 };
                        let sv = sign * zv;
                        let alpha_t = if t == 1.0 { *alpha } else { 1.0 - alpha };
                        let pt = sigmoid(sv);
                        let one_minus = sigmoid(-sv);
                        let raw_log = -softplus(-sv);
                        let clamped = raw_log < LOG_CLAMP;
                        let log_pt = raw_log.max(LOG_CLAMP);
                        let mut d = -gamma * pt * math::powf(one_minus, *gamma) * log_pt;
                        if !clamped {
                            d += math::powf(one_minus, gamma + 1.0);
                        }
                        *p += scale * sign * (-alpha_t) * d;
                    }
                })
            }
        }
    }
}

/// Accumulates `c·g` into `s`, summing over `g` when `s` is a broadcast scalar.
fn reduce_into(s: &mut [f64], g: &[f64], c: f64) {
    if s.len() == g.len() {
        s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
    } else {
        s[0] += c * g.iter().sum::<f64>();
    }
}

fn mul_grad_into(s: &mut [f64], g: &[f64], other: &[f64]) {
    let o = |i: usize| if other.len() == 1 { other[0] } else { other[i] };
    if s.len() == g.len() {
        s.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * o(i));
    } else {
        s[0] += g.iter().enumerate().map(|(i, gv)| gv * o(i)).sum::<f64>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(&[rows, cols], data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of a scalar function of one input tensor.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var, h: f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                let eval = |t: &Tensor| {
                    let mut tape = Tape::new();
                    let v = tape.leaf(t);
                    let out = f(&mut tape, v);
                    tape.scalar_value(out)
                };
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn analytic_grad(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().requires_grad());
        let out = f(&mut tape, v);
        tape.backward(out).unwrap();
        tape.grad(v).unwrap().to_vec()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(matches!(Tensor::new(&[1], vec![f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_identity_and_inner() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(&mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.leaf(&mat(1, 2, &[1.0, 2.0]));
        let c = tape.leaf(&mat(2, 1, &[3.0, 4.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p), &[11.0]);
        assert!(matches!(tape.matmul(r, r), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 3]);
        let b = random(&mut rng, &[3, 3]);
        let f = |tape: &mut Tape, x: Var| {
            let bv = tape.leaf(&b);
            let p = tape.matmul(x, bv).unwrap();
            tape.sum(p).unwrap()
        };
        let err = max_rel_err(&analytic_grad(&a, &f), &numeric_grad(&a, &f, 1e-6));
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(1, 3, &[0.0, 0.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.leaf(&mat(1, 3, &[1000.0, 0.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        assert!((tape.value(s)[0] - 1.0).abs() < 1e-12);
        let x = tape.leaf(&mat(1, 2, &[1.0, 0.0]));
        let s = tape.softmax_rows(x).unwrap();
        let e = core::f64::consts::E;
        assert!((tape.value(s)[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((tape.value(s)[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_excluded_and_empty_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(&mat(2, 2, &[3.0, 1.0, 2.0, 2.0]));
        let s = tape.masked_softmax_rows(x, vec![true, false, true, true]).unwrap();
        assert_eq!(tape.value(s), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(&Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m), &[3.0, 8.0]);
        let z = tape.leaf(&Tensor::new(&[1], vec![0.0]).unwrap());
        let e = tape.exp(z).unwrap();
        assert_eq!(tape.value(e), &[1.0]);
        assert_eq!(tape.log(z), Err(Error::LogDomain));
        let c = tape.leaf(&Tensor::new(&[3], vec![0.0; 3]).unwrap());
        assert!(matches!(tape.add(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn exp_gradient_is_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[5]);
        let f = |tape: &mut Tape, v: Var| {
            let e = tape.exp(v).unwrap();
            tape.sum(e).unwrap()
        };
        let g = analytic_grad(&x, &f);
        for (gv, xv) in g.iter().zip(x.data()) {
            assert!((gv - libm::exp(*xv)).abs() < 1e-15);
        }
        assert!(max_rel_err(&g, &numeric_grad(&x, &f, 1e-6)) < 1e-6);
    }

    #[test]
    fn backward_examples_and_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(tape.backward(s), Err(Error::TapeConsumed));

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap().requires_grad());
        let sq = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(sq), Err(Error::NonScalarLoss(2)));
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap().requires_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap().requires_grad());
        let y = tape.leaf(&Tensor::new(&[1], vec![5.0]).unwrap().requires_grad());
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.0]);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[4, 6]);
        let w = random(&mut rng, &[6, 6]);
        let gain = random(&mut rng, &[6]);
        let lifted = Tensor::new(&[4, 6], x.data().iter().map(|v| v + 2.0).collect()).unwrap();
        type Case<'a> = (&'a str, &'a Tensor, alloc::boxed::Box<dyn Fn(&mut Tape, Var) -> Var + 'a>);
        let cases: Vec<Case> = vec![
            ("transpose", &x, alloc::boxed::Box::new(|t: &mut Tape, v| {
                let tr = t.transpose(v).unwrap();
                let sq = t.mul(tr, tr).unwrap();
                t.sum(sq).unwrap()
            })),
            ("softmax", &x, alloc::boxed::Box::new(|t: &mut Tape, v| {
                let s = t.softmax_rows(v).unwrap();
                let c = t.constant(&[4, 6], (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
                let m = t.mul(s, c).unwrap();
                t.sum(m).unwrap()
            })),
            ("layer_norm", &x, alloc::boxed::Box::new(|t: &mut Tape, v| {
                let s = t.layer_norm_rows(v, 1e-5).unwrap();
                let c = t.constant(&[4, 6], (0..24).map(|i| libm::sin(i as f64)).collect()).unwrap();
                let m = t.mul(s, c).unwrap();
                t.sum(m).unwrap()
            })),
            ("gain_bias_relu", &x, alloc::boxed::Box::new(|t: &mut Tape, v| {
                let g = t.leaf(&gain);
                let a = t.mul_col_gain(v, g).unwrap();
                let b = t.add_row_bias(a, g).unwrap();
                let r = t.relu(b).unwrap();
                let sq = t.pow(r, 2.0).unwrap();
                t.sum(sq).unwrap()
            })),
            ("slice_concat_gather", &x, alloc::boxed::Box::new(|t: &mut Tape, v| {
                let a = t.slice_cols(v, 1, 3).unwrap();
                let b = t.slice_cols(v, 0, 2).unwrap();
                let c = t.concat_cols(&[a, b, a]).unwrap();
                let d = t.gather_rows(c, vec![Some(3), None, Some(0), Some(3)]).unwrap();
                let e = t.concat_rows(&[d, c]).unwrap();
                let sq = t.mul(e, e).unwrap();
                t.mean(sq).unwrap()
            })),
            ("log_sigmoid_neg", &lifted, alloc::boxed::Box::new(|t: &mut Tape, v| {
                let l = t.log(v).unwrap();
                let s = t.sigmoid(l).unwrap();
                let n = t.neg(s).unwrap();
                let sc = t.scale(n, 3.0).unwrap();
                let a = t.add_scalar(sc, 1.0).unwrap();
                let p = t.pow(a, 3.0).unwrap();
                t.sum(p).unwrap()
            })),
            ("matmul_sub", &x, alloc::boxed::Box::new(|t: &mut Tape, v| {
                let wv = t.leaf(&w);
                let p = t.matmul(v, wv).unwrap();
                let d = t.sub(p, v).unwrap();
                let e = t.exp(d).unwrap();
                t.mean(e).unwrap()
            })),
            ("scalar_broadcast", &x, alloc::boxed::Box::new(|t: &mut Tape, v| {
                let s = t.slice_cols(v, 0, 1).unwrap();
                let s = t.slice_cols(s, 0, 1).unwrap();
                let r = t.gather_rows(s, vec![Some(1)]).unwrap();
                let r = t.reshape(r, &[1]).unwrap();
                let m = t.mul(v, r).unwrap();
                let a = t.add(r, m).unwrap();
                let sq = t.mul(a, a).unwrap();
                t.sum(sq).unwrap()
            })),
            ("focal", &x, alloc::boxed::Box::new(|t: &mut Tape, v| {
                let targets = (0..24).map(|i| (i % 3 == 0) as u8 as f64).collect();
                t.focal_loss(v, targets, 0.25, 2.0).unwrap()
            })),
        ];
        for (name, input, f) in &cases {
            let a = analytic_grad(input, f.as_ref());
            let n = numeric_grad(input, f.as_ref(), 1e-5);
            let err = max_rel_err(&a, &n);
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn avg_pool_shapes_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random(&mut rng, &[8, 16, 3]);
        let mut tape = Tape::new();
        let v = tape.leaf(&img);
        let p = tape.avg_pool(v, 4).unwrap();
        assert_eq!(tape.shape(p), &[8, 3]);
        assert!(tape.avg_pool(v, 3).is_err());
        let f = |t: &mut Tape, v: Var| {
            let p = t.avg_pool(v, 2).unwrap();
            let sq = t.mul(p, p).unwrap();
            t.sum(sq).unwrap()
        };
        assert!(max_rel_err(&analytic_grad(&img, &f), &numeric_grad(&img, &f, 1e-6)) < 1e-6);
    }

    #[test]
    fn focal_loss_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::new(&[1], vec![0.0]).unwrap());
        let l = tape.focal_loss(z, vec![1.0], 0.25, 2.0).unwrap();
        let expected = 0.25 * 0.25 * libm::log(2.0);
        assert!((tape.scalar_value(l) - expected).abs() < 1e-15);
        assert!((tape.scalar_value(l) - 0.04332).abs() < 1e-5);

        // gamma = 0, alpha = 0.5 is half the binary cross-entropy.
        let zs = [-2.0, 0.3, 1.7];
        let ys = [1.0, 0.0, 1.0];
        let z = tape.leaf(&Tensor::new(&[3], zs.to_vec()).unwrap());
        let l = tape.focal_loss(z, ys.to_vec(), 0.5, 0.0).unwrap();
        let bce: f64 = zs
            .iter()
            .zip(&ys)
            .map(|(z, y)| {
                let p = 1.0 / (1.0 + libm::exp(-z));
                -(y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p))
            })
            .sum::<f64>()
            / 3.0;
        assert!((tape.scalar_value(l) - 0.5 * bce).abs() < 1e-14);

        assert!(tape.focal_loss(z, vec![1.0, 0.5, 0.0], 0.25, 2.0).is_err());
    }

    #[test]
    fn focal_loss_decreases_as_positive_becomes_certain() {
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let mut tape = Tape::new();
            let z = tape.leaf(&Tensor::new(&[1], vec![-5.0 + 0.5 * k as f64]).unwrap());
            let l = tape.focal_loss(z, vec![1.0], 0.25, 2.0).unwrap();
            let v = tape.scalar_value(l);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn field_weights_lambda_gradient() {
        let exponent = vec![0.0, 0.5, 1.0, 2.0, 0.25, 3.0];
        let f = |t: &mut Tape, l: Var| {
            let w = t.field_weights(l, [2, 3], exponent.clone(), vec![true, true]).unwrap();
            let c = t.constant(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.0, -1.0]).unwrap();
            let m = t.mul(w, c).unwrap();
            t.sum(m).unwrap()
        };
        let lam = Tensor::scalar(0.8).unwrap();
        let err = max_rel_err(&analytic_grad(&lam, &f), &numeric_grad(&lam, &f, 1e-6));
        assert!(err < 1e-8, "{err}");
        let mut tape = Tape::new();
        let l = tape.leaf(&lam);
        let w = tape.field_weights(l, [2, 3], exponent.clone(), vec![false, true]).unwrap();
        assert_eq!(&tape.value(w)[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[1], vec![3.0]).unwrap().requires_grad());
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.mul(x, x).unwrap();
        let c = tape.add(a, b).unwrap();
        let l = tape.add(c, x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0 + 6.0 + 1.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[1], vec![1000.0]).unwrap());
        assert_eq!(tape.exp(x), Err(Error::NonFinite("exp")));
    }
}
