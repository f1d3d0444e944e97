//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the
//! information its backward rule needs. Nodes are only ever appended, so the
//! node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.

use std::any::Any;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{Float, Tensor};
use crate::error::{Error, Result};

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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LogSigmoid(Var),
    Softmax(Var),
    MaskedLogSoftmax {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        dilation: usize,
    },
    MaxCols {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | AddCol(a, b) => {
                vec![*a, *b]
            }
            Transpose(x)
            | Scale(x, _)
            | Relu(x)
            | Gelu(x)
            | LogSigmoid(x)
            | Softmax(x)
            | MeanRows(x)
            | Sum(x)
            | Reshape(x) => vec![*x],
            MaskedLogSoftmax { x, .. }
            | MaxCols { x, .. }
            | SliceCols { x, .. }
            | GatherRows { x, .. }
            | L2NormalizeRows { x, .. }
            | Dropout { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv1d { x, w, .. } => vec![*x, *w],
            ConcatCols(xs) | ConcatRows(xs) => xs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation. Model parameters (`Tensor<f32>`) are bound lazily
/// through [`Tape::param`]; repeated binds of the same parameter return the
/// same node so gradients from every use accumulate in one place.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<usize, Var>,
    grad_enabled: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
            dropout_rng: None,
        }
    }

    /// A tape on which nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables [`Tape::dropout`] with a deterministic mask stream.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("grad matches value shape"))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (unless the tape is in inference mode).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn param(&mut self, p: &Tensor<f32>) -> Var {
        let key = p.storage_id();
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(cast_param(p));
        self.bound.insert(key, v);
        v
    }

    /// Non-trainable `f32` tensor (positional tables, frozen inputs) as a constant.
    pub fn fixed(&mut self, p: &Tensor<f32>) -> Var {
        self.constant(cast_param(p))
    }

    /// Make later [`Tape::param`] calls for `p` resolve to `v`.
    pub fn bind_param(&mut self, p: &Tensor<f32>, v: Var) -> Result<()> {
        if p.shape() != self.shape(v) {
            return Err(Error::shape("bind_param", p.shape(), self.shape(v)));
        }
        self.bound.insert(p.storage_id(), v);
        Ok(())
    }

    pub fn param_grad(&self, p: &Tensor<f32>) -> Option<&[T]> {
        self.bound.get(&p.storage_id()).and_then(|&v| self.grad(v))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if cfg!(debug_assertions) && !value.all_finite() {
            let inputs_finite = op.inputs().iter().all(|v| self.value(*v).all_finite());
            assert!(
                !inputs_finite || matches!(op, Op::Leaf),
                "non-finite output from finite inputs at tape node {}",
                self.nodes.len()
            );
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, rg)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_op(&[m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x, "transpose")?;
        let out = kernels::transpose(self.value(x).data(), r, c);
        Ok(self.push_op(&[c, r], out, Op::Transpose(x)))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Vec<T>> {
        self.same_shape(a, b, name)?;
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&shape, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&shape, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&shape, out, Op::Mul(a, b)))
    }

    /// `a[m×n] + b` where `b` is a row `[1×n]` (added to every row) or a
    /// column `[m×1]` (added to every column).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a, "add_broadcast")?;
        let (br, bc) = self.dims(b, "add_broadcast")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if br == 1 && bc == n {
            let out = (0..m * n).map(|i| av[i] + bv[i % n]).collect();
            Ok(self.push_op(&[m, n], out, Op::AddRow(a, b)))
        } else if br == m && bc == 1 {
            let out = (0..m * n).map(|i| av[i] + bv[i / n]).collect();
            Ok(self.push_op(&[m, n], out, Op::AddCol(a, b)))
        } else {
            Err(Error::shape("add_broadcast", self.shape(a), self.shape(b)))
        }
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.max(T::zero()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kernels::gelu(v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, Op::Gelu(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kernels::log_sigmoid(v))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, Op::LogSigmoid(x))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "softmax_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let o = &mut out[r * n..(r + 1) * n];
            let mut s = T::zero();
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - mx).exp();
                s += *ov;
            }
            for ov in o.iter_mut() {
                *ov /= s;
            }
        }
        Ok(self.push_op(&[m, n], out, Op::Softmax(x)))
    }

    /// Row-wise log-softmax over the entries where `mask` is true; masked-out
    /// entries are excluded from the normaliser and produce 0.
    pub fn masked_log_softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.dims(x, "masked_log_softmax_rows")?;
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(Error::shape(
                    "masked_log_softmax_rows",
                    &[m, n],
                    &[mk.len()],
                ));
            }
        }
        let keep = |i: usize| mask.as_ref().is_none_or(|mk| mk[i]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let mut mx = T::neg_infinity();
            for c in 0..n {
                if keep(r * n + c) {
                    mx = mx.max(xv[r * n + c]);
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut s = T::zero();
            for c in 0..n {
                if keep(r * n + c) {
                    s += (xv[r * n + c] - mx).exp();
                }
            }
            let lse = mx + s.ln();
            for c in 0..n {
                if keep(r * n + c) {
                    out[r * n + c] = xv[r * n + c] - lse;
                }
            }
        }
        Ok(self.push_op(&[m, n], out, Op::MaskedLogSoftmax { x, mask }))
    }

    /// Layer normalisation over the last axis with `gamma`, `beta` of shape
    /// `[1×n]` and epsilon `1e-5`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [1, n] {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = T::cst(1e-5);
        let nf = T::cst(n as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        Ok(self.push_op(
            &[m, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Causal dilated convolution: `x: [c_in×T]`, `w: [c_out×c_in×k]` →
    /// `[c_out×T]`. Output at `t` depends only on `x[..=t]`.
    pub fn conv1d_causal_dilated(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (c_in, t) = self.dims(x, "conv1d_causal_dilated")?;
        let (c_out, wc, k) = match self.shape(w) {
            [o, c, k] => (*o, *c, *k),
            other => return Err(Error::shape("conv1d_causal_dilated", self.shape(x), other)),
        };
        if wc != c_in || k == 0 || dilation == 0 {
            return Err(Error::shape(
                "conv1d_causal_dilated",
                self.shape(x),
                self.shape(w),
            ));
        }
        let out = kernels::conv1d_causal(
            self.value(x).data(),
            self.value(w).data(),
            c_in,
            c_out,
            k,
            t,
            dilation,
        );
        Ok(self.push_op(&[c_out, t], out, Op::Conv1d { x, w, dilation }))
    }

    /// Maximum over columns of each row: `[m×n]` → `[m×1]`.
    pub fn max_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "max_cols")?;
        let xv = self.value(x).data();
        let mut argmax = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mut best = 0;
            for c in 1..n {
                if row[c] > row[best] {
                    best = c;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        Ok(self.push_op(&[m, 1], out, Op::MaxCols { x, argmax }))
    }

    /// Mean over rows: `[m×n]` → `[1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "mean_rows")?;
        let xv = self.value(x).data();
        let inv = T::one() / T::cst(m as f64);
        let out = (0..n)
            .map(|c| (0..m).map(|r| xv[r * n + c]).sum::<T>() * inv)
            .collect();
        Ok(self.push_op(&[1, n], out, Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push_op(&[1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::cst(n as f64))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, len]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        Ok(self.push_op(&[m, len], out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.dims(x, "concat_cols")?;
            if r != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(x),
                ));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push_op(&[m, n], out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (_, n) = self.dims(first, "concat_rows")?;
        let mut m = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, c) = self.dims(x, "concat_rows")?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(x),
                ));
            }
            m += r;
            out.extend_from_slice(self.value(x).data());
        }
        Ok(self.push_op(&[m, n], out, Op::ConcatRows(xs.to_vec())))
    }

    /// `out[i] = x[idx[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::shape("gather_rows", &[m, n], &[idx.len()]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        Ok(self.push_op(
            &[idx.len(), n],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Scale every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "l2_normalize_rows")?;
        let floor = T::cst(1e-12);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(nrm);
            out.extend(row.iter().map(|&v| v / nrm));
        }
        Ok(self.push_op(&[m, n], out, Op::L2NormalizeRows { x, norms }))
    }

    /// Inverted dropout. Identity unless the tape was built with
    /// [`Tape::with_dropout`] and `p > 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = T::cst(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &k)| v * k)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(&shape, out, Op::Dropout { x, mask })
    }

    // ----------------------------------------------------------- backward

    /// Populate gradients of `loss` with respect to every node that requires
    /// one. Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Usage(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        // Accumulate into an input's gradient buffer if it wants one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        let dims = |v: Var| {
            let s = nodes[v.0].value.shape();
            (s[0], s[1])
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let (_, n) = dims(*b);
                acc(*a, &mut |da| {
                    let bt = kernels::transpose(val(*b), k, n);
                    kernels::matmul_acc(g, &bt, da, m, n, k);
                });
                acc(*b, &mut |db| {
                    kernels::matmul_at_acc(val(*a), g, db, m, k, n)
                });
            }
            Op::Transpose(x) => {
                let (r, c) = dims(*x);
                acc(*x, &mut |dx| {
                    let gt = kernels::transpose(g, c, r);
                    add_into(dx, &gt);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = dims(*b).1;
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                });
            }
            Op::AddCol(a, b) => {
                let n = dims(*a).1;
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (j, &gv) in g.iter().enumerate() {
                        db[j / n] += gv;
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |dx| {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv * *f;
                }
            }),
            Op::Relu(x) => acc(*x, &mut |dx| {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }),
            Op::Gelu(x) => acc(*x, &mut |dx| {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                    *d += gv * kernels::gelu_grad(xv);
                }
            }),
            Op::LogSigmoid(x) => acc(*x, &mut |dx| {
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                    *d += gv * kernels::sigmoid(-xv);
                }
            }),
            Op::Softmax(x) => {
                let (m, n) = dims(*x);
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for r in 0..m {
                        let s = r * n..(r + 1) * n;
                        let dot: T = g[s.clone()]
                            .iter()
                            .zip(&y[s.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for c in s {
                            dx[c] += y[c] * (g[c] - dot);
                        }
                    }
                });
            }
            Op::MaskedLogSoftmax { x, mask } => {
                let (m, n) = dims(*x);
                let y = node.value.data();
                let keep = |j: usize| mask.as_ref().is_none_or(|mk| mk[j]);
                acc(*x, &mut |dx| {
                    for r in 0..m {
                        let gsum: T = (r * n..(r + 1) * n)
                            .filter(|&j| keep(j))
                            .map(|j| g[j])
                            .sum();
                        for j in r * n..(r + 1) * n {
                            if keep(j) {
                                dx[j] += g[j] - y[j].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = dims(*x);
                let gv = val(*gamma);
                let nf = T::cst(n as f64);
                acc(*x, &mut |dx| {
                    for r in 0..m {
                        let s = r * n;
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..n {
                            let d = g[s + c] * gv[c];
                            mean_d += d;
                            mean_dh += d * xhat[s + c];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for c in 0..n {
                            let d = g[s + c] * gv[c];
                            dx[s + c] += rstd[r] * (d - mean_d - xhat[s + c] * mean_dh);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (j, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[j % n] += gv * h;
                    }
                });
                acc(*beta, &mut |db| {
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                });
            }
            Op::Conv1d { x, w, dilation } => {
                let (c_in, t) = dims(*x);
                let ws = nodes[w.0].value.shape();
                let (c_out, k) = (ws[0], ws[2]);
                let want_x = nodes[x.0].requires_grad;
                let want_w = nodes[w.0].requires_grad;
                let mut dx = want_x.then(|| vec![T::zero(); c_in * t]);
                let mut dw = want_w.then(|| vec![T::zero(); c_out * c_in * k]);
                kernels::conv1d_causal_backward(
                    val(*x),
                    val(*w),
                    g,
                    c_in,
                    c_out,
                    k,
                    t,
                    *dilation,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |d| add_into(d, &dw));
                }
            }
            Op::MaxCols { x, argmax } => {
                let n = dims(*x).1;
                acc(*x, &mut |dx| {
                    for (r, &c) in argmax.iter().enumerate() {
                        dx[r * n + c] += g[r];
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = dims(*x);
                let inv = T::one() / T::cst(m as f64);
                acc(*x, &mut |dx| {
                    for (j, d) in dx.iter_mut().enumerate() {
                        *d += g[j % n] * inv;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::SliceCols { x, start } => {
                let n = dims(*x).1;
                let (m, len) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &mut |dx| {
                    for r in 0..m {
                        add_into(
                            &mut dx[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for &x in xs {
                    let w = dims(x).1;
                    acc(x, &mut |dx| {
                        for r in 0..m {
                            add_into(
                                &mut dx[r * w..(r + 1) * w],
                                &g[r * n + off..r * n + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = nodes[x.0].value.numel();
                    acc(x, &mut |dx| add_into(dx, &g[off..off + len]));
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = dims(*x).1;
                acc(*x, &mut |dx| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut dx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::L2NormalizeRows { x, norms } => {
                let n = dims(*x).1;
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let s = r * n..(r + 1) * n;
                        let dot: T = g[s.clone()]
                            .iter()
                            .zip(&y[s.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for j in s {
                            dx[j] += (g[j] - y[j] * dot) / nrm;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |dx| {
                for ((d, &gv), &k) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gv * k;
                }
            }),
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn cast_param<T: Float>(p: &Tensor<f32>) -> Tensor<T> {
    match (p as &dyn Any).downcast_ref::<Tensor<T>>() {
        Some(same) => same.clone(),
        None => p.cast(),
    }
}
