//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]; values live in the tape
//! and are addressed by [`Var`] handles. [`Tape::backward`] replays the record
//! in reverse once, accumulating into per-node gradient buffers.
//!
//! All reductions run in index-ascending order so reruns are bit-identical.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Invalid(msg.into()))
}

/// Row-major dense array of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if shape.is_empty() || shape.contains(&0) || expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "tensor dimensions must be positive: {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("vector must be nonempty")
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
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

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for dim {d}");
            acc * d + i
        })
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[m,n] += A * B` where element `(i,j)` of each operand lives at
/// `i * row_stride + j * col_stride`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_rs: usize, a_cs: usize, b: &[f64], b_rs: usize, b_cs: usize, out: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * a_rs + (k - 1) * a_cs, "gemm: lhs buffer too short");
    assert!(b.len() > (k - 1) * b_rs + (n - 1) * b_cs, "gemm: rhs buffer too short");
    assert!(out.len() >= m * n, "gemm: output buffer too short");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product on raw row-major buffers, `out += a[m,k] * b[k,n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(m, k, n, a, k, 1, b, n, 1, out);
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(m, n, k, g, n, 1, b, 1, n, out);
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(k, m, n, a, 1, k, g, n, 1, out);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Silu,
    Softplus,
    Exp,
    Square,
    LeakyRelu(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// Backward rule for [`Tape::custom`]: receives parent values, the op's output
/// value and the incoming gradient; returns one gradient buffer per parent.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy {
        x: Var,
        w: Var,
        idx: usize,
    },
    MulConst(Var, Vec<f64>),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        // Rows that took part in the batch statistics; `None` for fixed statistics.
        mask: Option<Vec<bool>>,
    },
    MaskedMeanPool {
        x: Var,
        len: usize,
    },
    CausalConv {
        x: Var,
        w: Var,
        bias: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    TimeSlice {
        x: Var,
        t: usize,
    },
    StackTime(Vec<Var>),
    Stack(Vec<Var>),
    ReverseValid {
        x: Var,
        lengths: Vec<usize>,
    },
    Blend {
        new: Var,
        old: Var,
        mask: Vec<bool>,
    },
    UnfoldCausal {
        x: Var,
        k: usize,
    },
    Custom {
        parents: Vec<Var>,
        backward: BackwardFn,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::MulConst(x, _)
            | Op::Unary(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Softmax(x)
            | Op::Reshape(x) => vec![*x],
            Op::ScaleBy { x, w, .. } => vec![*x, *w],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::MaskedMeanPool { x, .. }
            | Op::SliceCols { x, .. }
            | Op::TimeSlice { x, .. }
            | Op::ReverseValid { x, .. }
            | Op::UnfoldCausal { x, .. } => vec![*x],
            Op::CausalConv { x, w, bias } => vec![*x, *w, *bias],
            Op::Concat(v) | Op::StackTime(v) | Op::Stack(v) => v.clone(),
            Op::Blend { new, old, .. } => vec![*new, *old],
            Op::Custom { parents, .. } => parents.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by a training-mode [`Tape::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population variance over the participating rows.
    pub var: Vec<f64>,
}

/// How [`Tape::batch_norm`] obtains its normalization statistics.
pub enum NormSource<'a> {
    /// Statistics from the rows whose mask entry is `true`.
    Batch { mask: &'a [bool] },
    /// Fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Define-by-run computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` if `v` is unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Gradient buffer, zero-filled when `v` received no gradient.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.len() != 1 || sr[0] != *sx.last().unwrap() {
            return Err(TensorError::Shape {
                op,
                left: sx.to_vec(),
                right: sr.to_vec(),
            });
        }
        Ok(())
    }

    /// Adds a `[D]` vector to every trailing-axis row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", x, row)?;
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        for chunk in out.data.chunks_mut(r.len()) {
            chunk.iter_mut().zip(r).for_each(|(o, &b)| *o += b);
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// Multiplies every trailing-axis row of `x` by a `[D]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", x, row)?;
        let mut out = self.value(x).clone();
        let r = self.value(row).data();
        for chunk in out.data.chunks_mut(r.len()) {
            chunk.iter_mut().zip(r).for_each(|(o, &b)| *o *= b);
        }
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c))
    }

    /// Multiplies `x` by the single element `w[idx]`.
    pub fn scale_by(&mut self, x: Var, w: Var, idx: usize) -> Result<Var> {
        if idx >= self.value(w).len() {
            return invalid(format!(
                "scale_by index {idx} outside weight of length {}",
                self.value(w).len()
            ));
        }
        let c = self.value(w).data[idx];
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        Ok(self.push(out, Op::ScaleBy { x, w, idx }))
    }

    /// Elementwise product with a non-differentiable constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return invalid("mul_const length mismatch");
        }
        let mut out = self.value(x).clone();
        out.data.iter_mut().zip(&c).for_each(|(o, &m)| *o *= m);
        Ok(self.push(out, Op::MulConst(x, c)))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f.apply(a)).collect(),
        };
        self.push(out, Op::Unary(x, f))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let k = v.last_dim();
        let mut out = v.clone();
        for row in out.data.chunks_mut(k) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// computed with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if v.shape.len() != 2 || v.shape[0] != targets.len() {
            return invalid(format!(
                "cross_entropy: logits {:?} vs {} targets",
                v.shape,
                targets.len()
            ));
        }
        let k = v.shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return invalid(format!("cross_entropy: target {t} outside {k} classes"));
        }
        let mut probs = v.data.clone();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Per-row normalization over the trailing axis (population variance,
    /// `eps` inside the square root) followed by `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_row("layer_norm", x, gamma)?;
        self.check_row("layer_norm", x, beta)?;
        let v = self.value(x);
        let d = v.last_dim();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; v.len()];
        let mut out = vec![0.0; v.len()];
        let mut inv_std = Vec::with_capacity(v.rows());
        for (r, row) in v.data.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(&v.shape.clone(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Per-channel normalization of `x[rows, C]`.
    ///
    /// With [`NormSource::Batch`] the statistics come from the masked rows and
    /// are returned for running-average updates; unmasked rows are normalized
    /// with the same statistics but contribute nothing to them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        source: NormSource<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.check_row("batch_norm", x, gamma)?;
        self.check_row("batch_norm", x, beta)?;
        let v = self.value(x);
        let c = v.last_dim();
        let rows = v.rows();
        let (mean, var, mask, stats) = match source {
            NormSource::Batch { mask } => {
                if mask.len() != rows {
                    return invalid("batch_norm mask length differs from row count");
                }
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return invalid("batch_norm with no valid rows");
                }
                let mut mean = vec![0.0; c];
                for (row, _) in v.data.chunks(c).zip(mask).filter(|(_, &m)| m) {
                    mean.iter_mut().zip(row).for_each(|(s, &a)| *s += a);
                }
                mean.iter_mut().for_each(|s| *s /= count as f64);
                let mut var = vec![0.0; c];
                for (row, _) in v.data.chunks(c).zip(mask).filter(|(_, &m)| m) {
                    for j in 0..c {
                        var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
                    }
                }
                var.iter_mut().for_each(|s| *s /= count as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(mask.to_vec()), Some(stats))
            }
            NormSource::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return invalid("batch_norm fixed statistics have wrong width");
                }
                (mean.to_vec(), var.to_vec(), None, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / (s + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; v.len()];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            for j in 0..c {
                let h = (v.data[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(&v.shape.clone(), out)?;
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mask,
            },
        );
        Ok((var_out, stats))
    }

    /// Mean of the first `len` rows of `x[T, D]`.
    pub fn masked_mean_pool(&mut self, x: Var, len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return invalid("masked_mean_pool expects [T, D]");
        }
        let (t, d) = (v.shape[0], v.shape[1]);
        if len == 0 || len > t {
            return invalid(format!("masked_mean_pool: valid length {len} outside 1..={t}"));
        }
        let mut out = vec![0.0; d];
        for row in v.data.chunks(d).take(len) {
            out.iter_mut().zip(row).for_each(|(o, &a)| *o += a);
        }
        out.iter_mut().for_each(|o| *o /= len as f64);
        Ok(self.push(Tensor::vector(out), Op::MaskedMeanPool { x, len }))
    }

    /// Depthwise causal convolution of `x[T, C]` with `w[K, C]`; output at `t`
    /// sees inputs `t-K+1..=t`, earlier positions read as zero.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(TensorError::Shape {
                op: "causal_conv1d",
                left: sx,
                right: sw,
            });
        }
        self.check_row("causal_conv1d", x, bias)?;
        let (t, c, k) = (sx[0], sx[1], sw[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let orow = &mut out[ti * c..(ti + 1) * c];
            orow.copy_from_slice(bv);
            for kk in 0..k {
                // tap kk reads x[ti - (k-1) + kk]
                let Some(src) = (ti + kk).checked_sub(k - 1) else {
                    continue;
                };
                let xrow = &xv[src * c..(src + 1) * c];
                let wrow = &wv[kk * c..(kk + 1) * c];
                for j in 0..c {
                    orow[j] += wrow[j] * xrow[j];
                }
            }
        }
        Ok(self.push(Tensor::new(&[t, c], out)?, Op::CausalConv { x, w, bias }))
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        if len == 0 || start + len > d {
            return invalid(format!("slice_cols {start}+{len} outside width {d}"));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for row in v.data.chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = v.shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(&shape, data)?, Op::SliceCols { x, start }))
    }

    /// Concatenation along the trailing axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            width += s.last().unwrap();
        }
        let rows = lead.iter().product::<usize>();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `x[B, T, C]` at time `t`, shape `[B, C]`.
    pub fn time_slice(&mut self, x: Var, t: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 3 || t >= v.shape[1] {
            return invalid(format!("time_slice {t} of {:?}", v.shape));
        }
        let (b, tt, c) = (v.shape[0], v.shape[1], v.shape[2]);
        let mut data = Vec::with_capacity(b * c);
        for bi in 0..b {
            let off = (bi * tt + t) * c;
            data.extend_from_slice(&v.data[off..off + c]);
        }
        Ok(self.push(Tensor::new(&[b, c], data)?, Op::TimeSlice { x, t }))
    }

    /// Inverse of [`Tape::time_slice`]: `T` tensors `[B, C]` into `[B, T, C]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let s0 = self.shape(steps[0]).to_vec();
        if s0.len() != 2 {
            return invalid("stack_time expects [B, C] steps");
        }
        if let Some(&bad) = steps.iter().find(|&&s| self.shape(s) != s0.as_slice()) {
            return Err(TensorError::Shape {
                op: "stack_time",
                left: s0,
                right: self.shape(bad).to_vec(),
            });
        }
        let (b, c, t) = (s0[0], s0[1], steps.len());
        let mut data = vec![0.0; b * t * c];
        for (ti, &s) in steps.iter().enumerate() {
            let v = self.value(s).data();
            for bi in 0..b {
                data[(bi * t + ti) * c..(bi * t + ti + 1) * c]
                    .copy_from_slice(&v[bi * c..(bi + 1) * c]);
            }
        }
        Ok(self.push(Tensor::new(&[b, t, c], data)?, Op::StackTime(steps.to_vec())))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let s0 = self.shape(items[0]).to_vec();
        if let Some(&bad) = items.iter().find(|&&s| self.shape(s) != s0.as_slice()) {
            return Err(TensorError::Shape {
                op: "stack",
                left: s0,
                right: self.shape(bad).to_vec(),
            });
        }
        let mut data = Vec::with_capacity(items.len() * s0.iter().product::<usize>());
        for &it in items {
            data.extend_from_slice(self.value(it).data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&s0);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Stack(items.to_vec())))
    }

    /// Reverses the first `lengths[b]` time steps of each sample in
    /// `x[B, T, C]`; padded steps stay in place. Self-inverse.
    pub fn reverse_valid(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 3 || lengths.len() != v.shape[0] {
            return invalid("reverse_valid expects [B, T, C] and B lengths");
        }
        let (t, c) = (v.shape[1], v.shape[2]);
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > t) {
            return invalid(format!("reverse_valid: length {bad} outside 1..={t}"));
        }
        let mut data = v.data.clone();
        for (bi, &len) in lengths.iter().enumerate() {
            for ti in 0..len {
                let src = (bi * t + ti) * c;
                let dst = (bi * t + len - 1 - ti) * c;
                data[dst..dst + c].copy_from_slice(&v.data[src..src + c]);
            }
        }
        let out = Tensor::new(&v.shape.clone(), data)?;
        Ok(self.push(
            out,
            Op::ReverseValid {
                x,
                lengths: lengths.to_vec(),
            },
        ))
    }

    /// Row-wise select on `[B, C]`: rows with `mask[b]` take `new`, others keep `old`.
    pub fn blend(&mut self, new: Var, old: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("blend", new, old)?;
        let nv = self.value(new);
        if nv.shape.len() != 2 || nv.shape[0] != mask.len() {
            return invalid("blend expects [B, C] with B mask entries");
        }
        let c = nv.shape[1];
        let ov = self.value(old);
        let mut data = ov.data.clone();
        for (bi, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            data[bi * c..(bi + 1) * c].copy_from_slice(&nv.data[bi * c..(bi + 1) * c]);
        }
        let out = Tensor::new(&nv.shape.clone(), data)?;
        Ok(self.push(
            out,
            Op::Blend {
                new,
                old,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Causal im2col: `x[B, T, C]` into `[B*T, K*C]` where block `kk` of row
    /// `(b, t)` holds `x[b, t-K+1+kk]` (zero before the start).
    pub fn unfold_causal(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape.len() != 3 || k == 0 {
            return invalid("unfold_causal expects [B, T, C] and k >= 1");
        }
        let (b, t, c) = (v.shape[0], v.shape[1], v.shape[2]);
        let mut data = vec![0.0; b * t * k * c];
        for bi in 0..b {
            for ti in 0..t {
                let orow = &mut data[(bi * t + ti) * k * c..(bi * t + ti + 1) * k * c];
                for kk in 0..k {
                    if let Some(src) = (ti + kk).checked_sub(k - 1) {
                        let off = (bi * t + src) * c;
                        orow[kk * c..(kk + 1) * c].copy_from_slice(&v.data[off..off + c]);
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(&[b * t, k * c], data)?, Op::UnfoldCausal { x, k }))
    }

    /// Records an op computed outside the tape with a caller-supplied backward rule.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.push(
            value,
            Op::Custom {
                parents: parents.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`, seeding `d loss / d loss = 1`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn add_into(&mut self, v: Var, g: &[f64]) {
        self.accumulate(v, |buf| buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x));
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op so parent grads can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_acc(g, self.value(*b).data(), &mut ga, m, k, n);
                    self.add_into(*a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(self.value(*a).data(), g, &mut gb, m, k, n);
                    self.add_into(*b, &gb);
                }
            }
            Op::Add(a, b) => {
                self.add_into(*a, g);
                self.add_into(*b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_into(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| x * y)
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(x, y)| x * y)
                    .collect();
                self.add_into(*a, &ga);
                self.add_into(*b, &gb);
            }
            Op::AddRow(x, row) => {
                self.add_into(*x, g);
                let d = self.value(*row).len();
                let mut gr = vec![0.0; d];
                for chunk in g.chunks(d) {
                    gr.iter_mut().zip(chunk).for_each(|(s, &v)| *s += v);
                }
                self.add_into(*row, &gr);
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row).data().to_vec();
                let d = r.len();
                let xv = self.value(*x).data();
                let mut gr = vec![0.0; d];
                let mut gx = vec![0.0; g.len()];
                for (ri, chunk) in g.chunks(d).enumerate() {
                    for j in 0..d {
                        gr[j] += chunk[j] * xv[ri * d + j];
                        gx[ri * d + j] = chunk[j] * r[j];
                    }
                }
                self.add_into(*x, &gx);
                self.add_into(*row, &gr);
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_into(*x, &gx);
            }
            Op::ScaleBy { x, w, idx } => {
                let c = self.value(*w).data()[*idx];
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                let gw: f64 = g.iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                self.add_into(*x, &gx);
                let idx = *idx;
                self.accumulate(*w, |buf| buf[idx] += gw);
            }
            Op::MulConst(x, c) => {
                let gx: Vec<f64> = g.iter().zip(c).map(|(a, b)| a * b).collect();
                self.add_into(*x, &gx);
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x).data();
                let yv = self.nodes[i].value.data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(gi, (&a, &y))| gi * f.derivative(a, y))
                    .collect();
                self.add_into(*x, &gx);
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |buf| buf.iter_mut().for_each(|b| *b += g0));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let g0 = g[0] / n;
                self.accumulate(*x, |buf| buf.iter_mut().for_each(|b| *b += g0));
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let k = self.nodes[i].value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((gy, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                    let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = yr[j] * (gy[j] - dot);
                    }
                }
                self.add_into(*x, &gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * k + t] -= scale;
                }
                self.add_into(*logits, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data().to_vec();
                let d = gam.len();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = vec![0.0; g.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let (mdh, mdhh) = (sum_dh / d as f64, sum_dh_h / d as f64);
                    for j in 0..d {
                        gx[r * d + j] = is * (gr[j] * gam[j] - mdh - hr[j] * mdhh);
                    }
                }
                self.add_into(*x, &gx);
                self.add_into(*gamma, &gg);
                self.add_into(*beta, &gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mask,
            } => {
                let gam = self.value(*gamma).data().to_vec();
                let c = gam.len();
                let rows = g.len() / c;
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * xhat[r * c + j];
                        gb[j] += g[r * c + j];
                    }
                }
                let mut gx = vec![0.0; g.len()];
                match mask {
                    None => {
                        for r in 0..rows {
                            for j in 0..c {
                                gx[r * c + j] = g[r * c + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    Some(mask) => {
                        // Statistics depend on masked rows only, but every row
                        // was normalized with them.
                        let count = mask.iter().filter(|&&m| m).count() as f64;
                        let mut sum_dh = vec![0.0; c];
                        let mut sum_dh_h = vec![0.0; c];
                        for r in 0..rows {
                            for j in 0..c {
                                let dh = g[r * c + j] * gam[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * xhat[r * c + j];
                            }
                        }
                        for r in 0..rows {
                            for j in 0..c {
                                let dh = g[r * c + j] * gam[j];
                                let mut v = dh;
                                if mask[r] {
                                    v -= (sum_dh[j] + xhat[r * c + j] * sum_dh_h[j]) / count;
                                }
                                gx[r * c + j] = v * inv_std[j];
                            }
                        }
                    }
                }
                self.add_into(*x, &gx);
                self.add_into(*gamma, &gg);
                self.add_into(*beta, &gb);
            }
            Op::MaskedMeanPool { x, len } => {
                let d = g.len();
                let inv = 1.0 / *len as f64;
                let len = *len;
                self.accumulate(*x, |buf| {
                    for row in buf.chunks_mut(d).take(len) {
                        row.iter_mut().zip(g).for_each(|(b, &v)| *b += v * inv);
                    }
                });
            }
            Op::CausalConv { x, w, bias } => {
                let (t, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[0];
                let xv = self.value(*x).data().to_vec();
                let wv = self.value(*w).data().to_vec();
                let mut gx = vec![0.0; t * c];
                let mut gw = vec![0.0; k * c];
                let mut gbias = vec![0.0; c];
                for ti in 0..t {
                    let grow = &g[ti * c..(ti + 1) * c];
                    gbias.iter_mut().zip(grow).for_each(|(s, &v)| *s += v);
                    for kk in 0..k {
                        let Some(src) = (ti + kk).checked_sub(k - 1) else {
                            continue;
                        };
                        for j in 0..c {
                            gw[kk * c + j] += grow[j] * xv[src * c + j];
                            gx[src * c + j] += grow[j] * wv[kk * c + j];
                        }
                    }
                }
                self.add_into(*x, &gx);
                self.add_into(*w, &gw);
                self.add_into(*bias, &gbias);
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).last_dim();
                let len = self.nodes[i].value.last_dim();
                let start = *start;
                self.accumulate(*x, |buf| {
                    for (brow, grow) in buf.chunks_mut(d).zip(g.chunks(len)) {
                        brow[start..start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(b, &v)| *b += v);
                    }
                });
            }
            Op::Concat(parts) => {
                let width = self.nodes[i].value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.accumulate(p, |buf| {
                        for (brow, grow) in buf.chunks_mut(w).zip(g.chunks(width)) {
                            brow.iter_mut()
                                .zip(&grow[off..off + w])
                                .for_each(|(b, &v)| *b += v);
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(x) => self.add_into(*x, g),
            Op::TimeSlice { x, t } => {
                let s = self.shape(*x).to_vec();
                let (b, tt, c) = (s[0], s[1], s[2]);
                let t = *t;
                self.accumulate(*x, |buf| {
                    for bi in 0..b {
                        let off = (bi * tt + t) * c;
                        buf[off..off + c]
                            .iter_mut()
                            .zip(&g[bi * c..(bi + 1) * c])
                            .for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::StackTime(steps) => {
                let s = self.nodes[i].value.shape().to_vec();
                let (b, t, c) = (s[0], s[1], s[2]);
                for (ti, &st) in steps.iter().enumerate() {
                    self.accumulate(st, |buf| {
                        for bi in 0..b {
                            let off = (bi * t + ti) * c;
                            buf[bi * c..(bi + 1) * c]
                                .iter_mut()
                                .zip(&g[off..off + c])
                                .for_each(|(d, &v)| *d += v);
                        }
                    });
                }
            }
            Op::Stack(items) => {
                let n = self.value(items[0]).len();
                for (k, &it) in items.iter().enumerate() {
                    self.add_into(it, &g[k * n..(k + 1) * n]);
                }
            }
            Op::ReverseValid { x, lengths } => {
                let s = self.shape(*x).to_vec();
                let (t, c) = (s[1], s[2]);
                let mut gx = g.to_vec();
                for (bi, &len) in lengths.iter().enumerate() {
                    for ti in 0..len {
                        let src = (bi * t + len - 1 - ti) * c;
                        let dst = (bi * t + ti) * c;
                        gx[dst..dst + c].copy_from_slice(&g[src..src + c]);
                    }
                }
                self.add_into(*x, &gx);
            }
            Op::Blend { new, old, mask } => {
                let c = self.nodes[i].value.last_dim();
                let mut gn = vec![0.0; g.len()];
                let mut go = vec![0.0; g.len()];
                for (bi, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut gn } else { &mut go };
                    dst[bi * c..(bi + 1) * c].copy_from_slice(&g[bi * c..(bi + 1) * c]);
                }
                self.add_into(*new, &gn);
                self.add_into(*old, &go);
            }
            Op::UnfoldCausal { x, k } => {
                let s = self.shape(*x).to_vec();
                let (b, t, c) = (s[0], s[1], s[2]);
                let k = *k;
                self.accumulate(*x, |buf| {
                    for bi in 0..b {
                        for ti in 0..t {
                            let grow = &g[(bi * t + ti) * k * c..(bi * t + ti + 1) * k * c];
                            for kk in 0..k {
                                if let Some(src) = (ti + kk).checked_sub(k - 1) {
                                    let off = (bi * t + src) * c;
                                    buf[off..off + c]
                                        .iter_mut()
                                        .zip(&grow[kk * c..(kk + 1) * c])
                                        .for_each(|(d, &v)| *d += v);
                                }
                            }
                        }
                    }
                });
            }
            Op::Custom { parents, backward } => {
                let grads = {
                    let vals: Vec<&Tensor> = parents.iter().map(|p| self.value(*p)).collect();
                    backward(&vals, &self.nodes[i].value, g)
                };
                for (p, gp) in parents.iter().zip(grads) {
                    if let Some(gp) = gp {
                        self.add_into(*p, &gp);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Maximum relative error between the tape's analytic gradients of `f` and
/// central differences `(f(x+eps) - f(x-eps)) / (2 eps)` over every input
/// coordinate. Relative error uses `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    grad_check_coords(f, inputs, eps, &coords)
}

/// [`grad_check`] restricted to the listed coordinates of each input.
pub fn grad_check_coords<F>(f: F, inputs: &[Tensor], eps: f64, coords: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zero(v)).collect();

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (ii, idxs) in coords.iter().enumerate() {
        for &j in idxs {
            let orig = work[ii].data()[j];
            work[ii].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[ii].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ii].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Step sizes tried by [`grad_check_steps`].
pub const GRAD_CHECK_STEPS: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

/// Like [`grad_check`], but each coordinate is scored by its best agreement
/// over several step sizes. A single step cannot serve every coordinate of a
/// large model: gradients near 1e-8 drown in the roundoff of `f` at small
/// steps, strongly curved coordinates in truncation error at large ones. A
/// wrong backward rule disagrees at every step.
pub fn grad_check_steps<F>(f: F, inputs: &[Tensor], steps: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zero(v)).collect();

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for ii in 0..inputs.len() {
        for j in 0..inputs[ii].len() {
            let a = analytic[ii].data()[j];
            let orig = work[ii].data()[j];
            let mut best = f64::INFINITY;
            for &eps in steps {
                work[ii].data_mut()[j] = orig + eps;
                let plus = eval(&work)?;
                work[ii].data_mut()[j] = orig - eps;
                let minus = eval(&work)?;
                let numeric = (plus - minus) / (2.0 * eps);
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                best = best.min((a - numeric).abs() / denom);
            }
            work[ii].data_mut()[j] = orig;
            worst = worst.max(best);
        }
    }
    Ok(worst)
}
