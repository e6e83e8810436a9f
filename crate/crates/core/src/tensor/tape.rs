//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends one node holding its forward value. [`Tape::backward`]
//! walks the list in reverse and accumulates adjoints into the inputs, so a
//! node consumed twice receives the sum of both contributions.

use super::array::matrix_dims;
use super::{Real, Tensor, TensorError};

const LAYERNORM_EPS: f64 = 1e-6;
/// Exponent cap for keys whose softmax weight is zero; keeps their relaxed
/// gradient finite when their logit exceeds every live logit.
const MASKED_EXP_CAP: f64 = 60.0;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    ScaleRows { x: Var, w: Var },
    MulScalar { x: Var, s: Var },
    Scale { x: Var, c: T },
    AddConst { x: Var },
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<T>, xhat: Vec<T> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    WeightedSoftmax { x: Var, w: Var, exps: Vec<T>, sums: Vec<T> },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    ZeroRows { x: Var, keep: Vec<bool> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    StraightThrough { soft: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::ScaleRows { .. } => "scale_rows",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax { .. } => "softmax",
            Op::WeightedSoftmax { .. } => "weighted_softmax",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::ZeroRows { .. } => "zero_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Attaches a name used in non-finite diagnostics.
    pub fn set_label(&mut self, var: Var, label: impl Into<String>) {
        self.nodes[var.0].label = Some(label.into());
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn scalar(&self, var: Var) -> T {
        self.nodes[var.0].value.data()[0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Names the first node (in execution order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| match &n.label {
                Some(l) => format!("{l} (node {i}, op {})", n.op.name()),
                None => format!("node {i}, op {}", n.op.name()),
            })
        })
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::NotMatrix {
                op,
                shape: self.shape(v).to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias row (numel = column count) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, cols) = matrix_dims(self.shape(x));
        if self.value(bias).numel() != cols {
            return Err(self.shape_err("add_row", x, bias));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let v = Tensor::new(self.shape(x), data)?;
        Ok(self.push(v, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// Multiplies row `i` of `x` by `w[i]` (numel of `w` = row count).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (rows, cols) = matrix_dims(self.shape(x));
        if self.value(w).numel() != rows {
            return Err(self.shape_err("scale_rows", x, w));
        }
        let wd = self.value(w).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .zip(wd)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let v = Tensor::new(self.shape(x), data)?;
        Ok(self.push(v, Op::ScaleRows { x, w }, &[x, w]))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(self.shape_err("mul_scalar", x, s));
        }
        let c = self.scalar(s);
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let v = Tensor::new(self.shape(x), data)?;
        Ok(self.push(v, Op::MulScalar { x, s }, &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.map_value(x, |v| v * c);
        self.push(v, Op::Scale { x, c }, &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.map_value(x, |v| v + c);
        self.push(v, Op::AddConst { x }, &[x])
    }

    fn map_value(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x), data).expect("map preserves length")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map_value(x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(&bad) = self.value(x).data().iter().find(|v| !(**v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad.f64(),
            });
        }
        let v = self.map_value(x, |v| v.ln());
        Ok(self.push(v, Op::Log(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map_value(x, |v| v.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map_value(x, |v| T::of(gelu_parts(v.f64()).0));
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (each with numel equal to the last extent).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (rows, cols) = matrix_dims(self.shape(x));
        if self.value(gain).numel() != cols {
            return Err(self.shape_err("layernorm", x, gain));
        }
        if self.value(bias).numel() != cols {
            return Err(self.shape_err("layernorm", x, bias));
        }
        let n = T::of(cols as f64);
        let eps = T::of(LAYERNORM_EPS);
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(rows * cols);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        for row in xd.chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
                xhat,
            },
            &[x, gain, bias],
        ))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, shape });
        }
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len)
                    .map(|k| xd[at(k)])
                    .fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for k in 0..len {
                    let e = (xd[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum = sum + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Softmax over the last axis where column `j` is weighted by `w[j] ≥ 0`:
    /// `y_j = w_j e^{x_j} / Σ_k w_k e^{x_k}`. A zero weight removes the
    /// column exactly as a `-∞` logit would, while the weight itself stays
    /// differentiable.
    pub fn weighted_softmax(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (rows, cols) = matrix_dims(self.shape(x));
        if self.value(w).numel() != cols {
            return Err(self.shape_err("weighted_softmax", x, w));
        }
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite {
                op: "weighted_softmax",
            });
        }
        let wd = self.value(w).data();
        if wd.iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Domain {
                op: "weighted_softmax",
                value: wd.iter().copied().fold(T::zero(), T::min).f64(),
            });
        }
        let cap = T::of(MASKED_EXP_CAP);
        let mut exps = Vec::with_capacity(rows * cols);
        let mut sums = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.value(x).data().chunks(cols) {
            let live_max = row
                .iter()
                .zip(wd)
                .filter(|(_, &w)| w > T::zero())
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let max = if live_max.is_finite() {
                live_max
            } else {
                row.iter().copied().fold(T::neg_infinity(), T::max)
            };
            let start = exps.len();
            let mut sum = T::zero();
            for (&v, &wj) in row.iter().zip(wd) {
                let e = (v - max).min(cap).exp();
                exps.push(e);
                sum = sum + wj * e;
            }
            sums.push(sum);
            for (e, &wj) in exps[start..].iter().zip(wd) {
                out.push(wj * *e / sum);
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        Ok(self.push(v, Op::WeightedSoftmax { x, w, exps, sums }, &[x, w]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis { axis, shape: base });
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(self.shape_err("concat", first, p));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.shape(p)[axis..].iter().product())
            .collect();
        let mut out = Vec::with_capacity(outer * widths.iter().sum::<usize>());
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            parts,
        ))
    }

    /// Columns `start..start + len` of the matrix view of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = matrix_dims(self.shape(x));
        if start + len > cols {
            return Err(TensorError::Slice {
                start,
                len,
                extent: cols,
            });
        }
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let v = Tensor::new(&[rows, len], data)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    /// Gathers the listed rows of the matrix view of `x`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (n, cols) = matrix_dims(self.shape(x));
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Index { index: bad, len: n });
        }
        let xd = self.value(x).data();
        let data = rows
            .iter()
            .flat_map(|&r| xd[r * cols..(r + 1) * cols].iter().copied())
            .collect();
        let v = Tensor::new(&[rows.len(), cols], data)?;
        Ok(self.push(
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Zeroes every row `i` with `keep[i] == false`.
    pub fn zero_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var, TensorError> {
        let (rows, cols) = matrix_dims(self.shape(x));
        if keep.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "zero_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .zip(keep)
            .flat_map(|(row, &k)| row.iter().map(move |&v| if k { v } else { T::zero() }))
            .collect();
        let v = Tensor::new(self.shape(x), data)?;
        Ok(self.push(
            v,
            Op::ZeroRows {
                x,
                keep: keep.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.value(x).data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `-log softmax(logits)[label]`, fused for stability.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(TensorError::Index {
                index: label,
                len: z.len(),
            });
        }
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = z.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let probs = z.iter().map(|&v| (v - lse).exp()).collect();
        let loss = lse - z[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Forward value `hard`, adjoint routed unchanged into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var, TensorError> {
        if hard.shape() != self.shape(soft) {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(soft).to_vec(),
                rhs: hard.shape().to_vec(),
            });
        }
        Ok(self.push(hard, Op::StraightThrough { soft }, &[soft]))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        // Zero-initialized adjoint buffer for `v`, or None if `v` is constant.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.numel();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = *self.shape(*a) else { unreachable!() };
                let n = self.shape(*b)[1];
                if let Some(ga) = slot!(*a) {
                    // dA = G · Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (1, n as isize),
                        T::one(),
                        ga,
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = slot!(*b) {
                    // dB = Aᵀ · G
                    T::gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        gb,
                        (n as isize, 1),
                    );
                }
            }
            Op::MatMulNt(a, b) => {
                let [m, k] = *self.shape(*a) else { unreachable!() };
                let n = self.shape(*b)[0];
                if let Some(ga) = slot!(*a) {
                    // dA = G · B
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.value(*b).data(),
                        (k as isize, 1),
                        T::one(),
                        ga,
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = slot!(*b) {
                    // dB = Gᵀ · A
                    T::gemm(
                        n,
                        m,
                        k,
                        g,
                        (1, n as isize),
                        self.value(*a).data(),
                        (k as isize, 1),
                        T::one(),
                        gb,
                        (k as isize, 1),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot!(v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    let bv = self.value(*b).data();
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + s * o;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    let av = self.value(*a).data();
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + s * o;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let cols = self.value(*bias).numel();
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
                if let Some(gb) = slot!(*bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let rows = self.value(*w).numel();
                let cols = g.len() / rows.max(1);
                if let Some(gx) = slot!(*x) {
                    let wd = self.value(*w).data();
                    for (r, (drow, grow)) in gx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        for (d, &s) in drow.iter_mut().zip(grow) {
                            *d = *d + s * wd[r];
                        }
                    }
                }
                if let Some(gw) = slot!(*w) {
                    let xd = self.value(*x).data();
                    for (r, (xrow, grow)) in xd.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: T = xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        gw[r] = gw[r] + dot;
                    }
                }
            }
            Op::MulScalar { x, s } => {
                if let Some(gx) = slot!(*x) {
                    let c = self.scalar(*s);
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * c);
                }
                if let Some(gs) = slot!(*s) {
                    let dot: T = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&a, &b)| a * b)
                        .sum();
                    gs[0] = gs[0] + dot;
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *c);
                }
            }
            Op::AddConst { x } | Op::StraightThrough { soft: x } => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + s * o * (T::one() - o);
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = slot!(*x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *d = *d + s / v;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = slot!(*x) {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(y) {
                        *d = *d + s * o;
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                if let Some(gx) = slot!(*x) {
                    for ((d, &s), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *d = *d + s * T::of(gelu_parts(v.f64()).1);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
                xhat,
            } => {
                let cols = self.value(*gain).numel();
                let gd = self.value(*gain).data();
                let n = T::of(cols as f64);
                if let Some(gx) = slot!(*x) {
                    for (r, ((drow, grow), hrow)) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let dh: Vec<T> = grow.iter().zip(gd).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((d, &a), &h) in drow.iter_mut().zip(&dh).zip(hrow) {
                            *d = *d + rstd[r] * (a - mean_dh - h * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, &s), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *d = *d + s * h;
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for grow in g.chunks(cols) {
                        gb.iter_mut().zip(grow).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(gx) = slot!(*x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: T = (0..*len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..*len {
                                let j = at(k);
                                gx[j] = gx[j] + y[j] * (g[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::WeightedSoftmax { x, w, exps, sums } => {
                let cols = self.value(*w).numel();
                let dots: Vec<T> = g
                    .chunks(cols)
                    .zip(y.chunks(cols))
                    .map(|(gr, yr)| gr.iter().zip(yr).map(|(&a, &b)| a * b).sum())
                    .collect();
                if let Some(gx) = slot!(*x) {
                    for (r, ((drow, grow), yrow)) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.chunks(cols))
                        .enumerate()
                    {
                        for ((d, &s), &o) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + o * (s - dots[r]);
                        }
                    }
                }
                if let Some(gw) = slot!(*w) {
                    for (r, (grow, erow)) in g.chunks(cols).zip(exps.chunks(cols)).enumerate() {
                        for ((d, &s), &e) in gw.iter_mut().zip(grow).zip(erow) {
                            *d = *d + e / sums[r] * (s - dots[r]);
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = slot!(p) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            gp[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d = *d + s);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (_, cols) = matrix_dims(self.shape(*x));
                let len = node.value.shape()[1];
                if let Some(gx) = slot!(*x) {
                    for (drow, grow) in gx.chunks_mut(cols).zip(g.chunks(len)) {
                        drow[*start..*start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let (_, cols) = matrix_dims(self.shape(*x));
                if let Some(gx) = slot!(*x) {
                    for (&r, grow) in rows.iter().zip(g.chunks(cols)) {
                        gx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::ZeroRows { x, keep } => {
                let (_, cols) = matrix_dims(self.shape(*x));
                if let Some(gx) = slot!(*x) {
                    for ((drow, grow), &k) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(keep) {
                        if k {
                            drow.iter_mut().zip(grow).for_each(|(d, &s)| *d = *d + s);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot!(*x) {
                    let s = g[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if let Some(gl) = slot!(*logits) {
                    for (j, (d, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *label { T::one() } else { T::zero() };
                        *d = *d + g[0] * (p - onehot);
                    }
                }
            }
        }
    }
}
