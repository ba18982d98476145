//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Every operation appends a node holding its forward value. `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products into the leaves that
//! were created with [`Graph::param`]. Nodes that do not depend on any parameter
//! are skipped entirely, so constant inputs (backbone features) never get a
//! gradient buffer.

use crate::error::{Error, Result};

use super::scalar::View;
use super::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Expand(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    /// Keeps `tanh` of the inner polynomial for the reverse pass.
    Gelu(Var, Tensor<T>),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    Reshape(Var),
    /// Keeps the attention probabilities, `(B·H·nq)×nk`.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        scale: T,
        probs: Tensor<T>,
    },
    MatMulBlocks(Var, Var),
}

/// Geometry of a batched multi-head attention call.
#[derive(Clone, Copy)]
struct AttnDims {
    batch: usize,
    heads: usize,
    nq: usize,
    nk: usize,
    d: usize,
    dh: usize,
}

impl AttnDims {
    fn q_row(&self, b: usize, h: usize, i: usize) -> usize {
        (b * self.nq + i) * self.d + h * self.dh
    }

    fn kv_row(&self, b: usize, h: usize, j: usize) -> usize {
        (b * self.nk + j) * self.d + h * self.dh
    }

    fn p_row(&self, b: usize, h: usize, i: usize) -> usize {
        ((b * self.heads + h) * self.nq + i) * self.nk
    }

    // head `h` of sample `b` from a key/value matrix, transposed to `dh×nk`
    fn gather_t<T: Scalar>(&self, src: &[T], b: usize, h: usize, out: &mut Vec<T>) {
        out.resize(self.dh * self.nk, T::zero());
        for j in 0..self.nk {
            let row = &src[self.kv_row(b, h, j)..][..self.dh];
            for (c, &v) in row.iter().enumerate() {
                out[c * self.nk + j] = v;
            }
        }
    }

    fn scatter_t<T: Scalar>(&self, src: &[T], b: usize, h: usize, dst: &mut [T]) {
        for j in 0..self.nk {
            let row = &mut dst[self.kv_row(b, h, j)..][..self.dh];
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v + src[c * self.nk + j];
            }
        }
    }
}

// eight independent partial sums so the loop vectorizes
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        let (x, y): (&[T; 8], &[T; 8]) = (x.try_into().unwrap(), y.try_into().unwrap());
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// A computation tape. One graph per forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

const GELU_K: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

// tanh through one exp; saturates cleanly to ±1
fn tanh_exp<T: Scalar>(u: T) -> T {
    T::one() - T::lit(2.0) / ((u + u).exp() + T::one())
}

fn gelu_inner<T: Scalar>(x: T) -> T {
    tanh_exp(T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x))
}

#[cfg(test)]
fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_inner(x))
}

/// Derivative of GELU at `x` given `t = tanh(c·(x + k·x³))`.
fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_K) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Row-wise softmax on a plain tensor, outside any graph.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        softmax_row(x.row(r), out.row_mut(r));
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// A trainable leaf; its gradient accumulates across `backward` calls.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Consumes the graph and returns one node's value without copying it.
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    // ---- forward operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(Op::Transpose(a), value, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &self.shape(a), &self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Div(a, b), value, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.needs(&[a]);
        self.push(Op::Scale(a, factor), value, rg)
    }

    /// Adds a `1×n` row to every row of an `m×n` tensor (bias, broadcast embedding).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        if self.shape(row) != [1, n] {
            return Err(Error::shape("add_row", &[m, n], &self.shape(row)));
        }
        let mut value = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *v = *v + b;
            }
        }
        let rg = self.needs(&[x, row]);
        Ok(self.push(Op::AddRow(x, row), value, rg))
    }

    /// Broadcasts a `1×1` tensor to `rows×cols`.
    pub fn expand(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.shape(s) != [1, 1] {
            return Err(Error::shape("expand", &self.shape(s), &[rows, cols]));
        }
        let value = Tensor::full(rows, cols, self.value(s).item());
        let rg = self.needs(&[s]);
        Ok(self.push(Op::Expand(s), value, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let rg = self.needs(&[x]);
        self.push(Op::SoftmaxRows(x), value, rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = src.clone();
        for r in 0..src.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let rg = self.needs(&[x]);
        self.push(Op::LogSoftmaxRows(x), value, rg)
    }

    /// Per-row normalization to zero mean and unit (biased) variance, then `gain·x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let [m, d] = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != [1, d] {
                return Err(Error::shape("layer_norm", &[m, d], &self.shape(p)));
            }
        }
        let (xhat, _) = normalize_rows(self.value(x), eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut value = xhat;
        for r in 0..m {
            for (c, v) in value.row_mut(r).iter_mut().enumerate() {
                *v = *v * g[c] + b[c];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, value, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_inner);
        let value = self.value(x).zip_map(&t, |v, tv| T::lit(0.5) * v * (T::one() + tv));
        let rg = self.needs(&[x]);
        let t = if rg { t } else { Tensor::zeros(1, 1) };
        self.push(Op::Gelu(x, t), value, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.needs(&[x]);
        self.push(Op::Tanh(x), value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.needs(&[x]);
        self.push(Op::Sigmoid(x), value, rg)
    }

    /// `ln(1 + eˣ)` in overflow-free form.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        let rg = self.needs(&[x]);
        self.push(Op::Softplus(x), value, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = self.shape(first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p)[1] != cols {
                return Err(Error::shape("concat_rows", &self.shape(first), &self.shape(p)));
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = self.needs(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.shape(first)[0];
        for &p in parts {
            if self.shape(p)[0] != rows {
                return Err(Error::shape("concat_cols", &self.shape(first), &self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        let rg = self.needs(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", &[m, n], &[start, end]));
        }
        let value = Tensor::new(
            end - start,
            n,
            self.value(x).data()[start * n..end * n].to_vec(),
        )?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SliceRows(x, start), value, rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, end]));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let value = Tensor::new(m, end - start, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SliceCols(x, start), value, rg))
    }

    /// Gathers the listed rows, in order.
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(x);
        if indices.is_empty() || indices.iter().any(|&i| i >= m) {
            return Err(Error::shape("select_rows", &[m, n], &[indices.len(), n]));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(indices.len(), n, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::SelectRows(x, indices.to_vec()), value, rg))
    }

    /// For each row `r`, picks column `cols[r]`; result is `m×1`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(x);
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(Error::shape("pick_cols", &[m, n], &[cols.len(), 1]));
        }
        let src = self.value(x);
        let data = cols.iter().enumerate().map(|(r, &c)| src.get(r, c)).collect();
        let value = Tensor::new(m, 1, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::PickCols(x, cols.to_vec()), value, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(Op::SumAll(x), value, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        let rg = self.needs(&[x]);
        self.push(Op::MeanAll(x), value, rg)
    }

    /// Sum of each row; `m×n → m×1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row(r).iter().copied().sum()).collect();
        let value = Tensor::new(t.rows(), 1, data).expect("rows > 0");
        let rg = self.needs(&[x]);
        self.push(Op::SumCols(x), value, rg)
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(x);
        if rows * cols != src.len() {
            return Err(Error::shape("reshape", &src.shape(), &[rows, cols]));
        }
        let value = Tensor::new(rows, cols, src.data().to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Scaled dot-product attention over `batch` stacked samples and `heads`
    /// equal column groups. `q` is `(B·nq)×d`, `k` and `v` are `(B·nk)×d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize, scale: T) -> Result<Var> {
        let [qr, d] = self.shape(q);
        let [kr, kd] = self.shape(k);
        if batch == 0 || heads == 0 || d % heads != 0 || qr % batch != 0 || kr % batch != 0 || kd != d {
            return Err(Error::shape("attention", &[qr, d], &[kr, kd]));
        }
        if self.shape(v) != [kr, kd] {
            return Err(Error::shape("attention", &[kr, kd], &self.shape(v)));
        }
        let dims = AttnDims {
            batch,
            heads,
            nq: qr / batch,
            nk: kr / batch,
            d,
            dh: d / heads,
        };
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = Tensor::zeros(batch * heads * dims.nq, dims.nk);
        let mut out = Tensor::zeros(qr, d);
        let mut logits = vec![T::zero(); dims.nk];
        let (mut kt, mut vt) = (Vec::new(), Vec::new());
        for b in 0..batch {
            for h in 0..heads {
                dims.gather_t(kv, b, h, &mut kt);
                dims.gather_t(vv, b, h, &mut vt);
                for i in 0..dims.nq {
                    let qi = &qv[dims.q_row(b, h, i)..][..dims.dh];
                    logits.fill(T::zero());
                    for (c, &qc) in qi.iter().enumerate() {
                        axpy(qc * scale, &kt[c * dims.nk..][..dims.nk], &mut logits);
                    }
                    let pr = &mut probs.data_mut()[dims.p_row(b, h, i)..][..dims.nk];
                    softmax_row(&logits, pr);
                    let pr = &probs.data()[dims.p_row(b, h, i)..][..dims.nk];
                    let oi = &mut out.data_mut()[dims.q_row(b, h, i)..][..dims.dh];
                    for (c, o) in oi.iter_mut().enumerate() {
                        *o = dot(pr, &vt[c * dims.nk..][..dims.nk]);
                    }
                }
            }
        }
        let rg = self.needs(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            heads,
            scale,
            probs,
        };
        Ok(self.push(op, out, rg))
    }

    /// Attention probabilities of a node made by [`Graph::attention`], stacked
    /// per sample then per head: rows `(b·H + h)·nq ..`.
    pub fn attention_probs(&self, v: Var) -> Option<&Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `a` (`m×n`) times each `n`-row block of `x`; `(B·n)×d → (B·m)×d`.
    pub fn matmul_blocks(&mut self, a: Var, x: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let [xr, d] = self.shape(x);
        if n == 0 || xr % n != 0 {
            return Err(Error::shape("matmul_blocks", &[m, n], &[xr, d]));
        }
        let batch = xr / n;
        let mut out = Tensor::zeros(batch * m, d);
        let (av, xv) = (self.value(a).data(), self.value(x).data());
        for b in 0..batch {
            T::gemm_view(
                T::one(),
                av,
                View::dense(0, m, n, n),
                xv,
                View::dense(b * n * d, n, d, d),
                T::zero(),
                out.data_mut(),
                View::dense(b * m * d, m, d, d),
            );
        }
        let rg = self.needs(&[a, x]);
        Ok(self.push(Op::MatMulBlocks(a, x), out, rg))
    }

    /// `x·w + b` applied independently to every row (kernel-size-1 convolution).
    pub fn pointwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- reverse pass -------------------------------------------------------

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_with(loss, Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product: backpropagates `seed` as the gradient of `output`.
    pub fn backward_with(&mut self, output: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward", &self.shape(output), &seed.shape()));
        }
        if !self.nodes[output.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(m, k);
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, T::zero(), da.data_mut());
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(k, n);
                    T::gemm(k, m, n, av.data(), true, g.data(), false, T::zero(), db.data_mut());
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                acc(*a, g.zip_map(bv, |gv, bv| gv / bv));
                // d(a/b)/db = -y/b
                let t = y.zip_map(bv, |yv, bv| yv / bv);
                acc(*b, g.zip_map(&t, |gv, tv| -gv * tv));
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * *f)),
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                acc(*row, column_sums(g));
            }
            Op::Expand(s) => acc(*s, Tensor::scalar(g.sum())),
            Op::SoftmaxRows(x) => {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: T = gr.iter().copied().sum();
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = gr[c] - yr[c].exp() * total;
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xhat, inv_std) = normalize_rows(self.value(*x), *eps);
                let gv = self.value(*gain).data();
                let [m, d] = xhat.shape();
                if self.requires_grad(*gain) {
                    acc(*gain, column_sums(&g.zip_map(&xhat, |a, b| a * b)));
                }
                if self.requires_grad(*bias) {
                    acc(*bias, column_sums(g));
                }
                if self.requires_grad(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let mut dx = Tensor::zeros(m, d);
                    for r in 0..m {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let dxhat: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu(x, t) => {
                let xs = self.value(*x).data();
                let mut dx = g.clone();
                for ((d, &xv), &tv) in dx.data_mut().iter_mut().zip(xs).zip(t.data()) {
                    *d = *d * gelu_grad(xv, tv);
                }
                acc(*x, dx);
            }
            Op::Tanh(x) => acc(*x, g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))),
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))),
            Op::Softplus(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv))),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [rows, cols] = self.shape(p);
                    let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    acc(p, Tensor::new(rows, cols, data)?);
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [rows, cols] = self.shape(p);
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        data.extend_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    acc(p, Tensor::new(rows, cols, data)?);
                    offset += cols;
                }
            }
            Op::SliceRows(x, start) => {
                if self.requires_grad(*x) {
                    // accumulate in place; many slices of one large tensor are common
                    let [m, n] = self.shape(*x);
                    let dx = grads[x.0].get_or_insert_with(|| Tensor::zeros(m, n));
                    let region = &mut dx.data_mut()[start * n..start * n + g.len()];
                    for (d, &v) in region.iter_mut().zip(g.data()) {
                        *d = *d + v;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let [m, n] = self.shape(*x);
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::SelectRows(x, indices) => {
                let [m, n] = self.shape(*x);
                let mut dx = Tensor::zeros(m, n);
                for (k, &i) in indices.iter().enumerate() {
                    for (d, &gv) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d = *d + gv;
                    }
                }
                acc(*x, dx);
            }
            Op::PickCols(x, cols) => {
                let [m, n] = self.shape(*x);
                let mut dx = Tensor::zeros(m, n);
                for (r, &c) in cols.iter().enumerate() {
                    dx.set(r, c, g.get(r, 0));
                }
                acc(*x, dx);
            }
            Op::SumAll(x) => {
                let [m, n] = self.shape(*x);
                acc(*x, Tensor::full(m, n, g.item()));
            }
            Op::MeanAll(x) => {
                let [m, n] = self.shape(*x);
                let scale = g.item() / T::from_usize(m * n).unwrap();
                acc(*x, Tensor::full(m, n, scale));
            }
            Op::SumCols(x) => {
                let [m, n] = self.shape(*x);
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    let gv = g.get(r, 0);
                    dx.row_mut(r).fill(gv);
                }
                acc(*x, dx);
            }
            Op::Reshape(x) => {
                let [m, n] = self.shape(*x);
                acc(*x, Tensor::new(m, n, g.data().to_vec())?);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                scale,
                probs,
            } => {
                let [qr, d] = self.shape(*q);
                let kr = self.shape(*k)[0];
                let dims = AttnDims {
                    batch: *batch,
                    heads: *heads,
                    nq: qr / batch,
                    nk: kr / batch,
                    d,
                    dh: d / heads,
                };
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let need_qk = self.requires_grad(*q) || self.requires_grad(*k);
                let mut dq = Tensor::zeros(qr, d);
                let mut dk = Tensor::zeros(kr, d);
                let mut dv = Tensor::zeros(kr, d);
                let need_v = self.requires_grad(*v);
                let (nk, dh) = (dims.nk, dims.dh);
                let mut ds = vec![T::zero(); nk];
                let (mut kt, mut vt) = (Vec::new(), Vec::new());
                let mut dkt = vec![T::zero(); dh * nk];
                let mut dvt = vec![T::zero(); dh * nk];
                for b in 0..dims.batch {
                    for h in 0..dims.heads {
                        dims.gather_t(kv, b, h, &mut kt);
                        dims.gather_t(vv, b, h, &mut vt);
                        dkt.fill(T::zero());
                        dvt.fill(T::zero());
                        for i in 0..dims.nq {
                            let pr = &probs.data()[dims.p_row(b, h, i)..][..nk];
                            let gi = &g.data()[dims.q_row(b, h, i)..][..dh];
                            if need_v {
                                for (c, &gc) in gi.iter().enumerate() {
                                    axpy(gc, pr, &mut dvt[c * nk..][..nk]);
                                }
                            }
                            if !need_qk {
                                continue;
                            }
                            // dP = g·vᵀ, then the softmax Jacobian
                            ds.fill(T::zero());
                            for (c, &gc) in gi.iter().enumerate() {
                                axpy(gc, &vt[c * nk..][..nk], &mut ds);
                            }
                            let total = dot(pr, &ds);
                            for (d, &pj) in ds.iter_mut().zip(pr) {
                                *d = *scale * pj * (*d - total);
                            }
                            let qi = &qv[dims.q_row(b, h, i)..][..dh];
                            let dqi = &mut dq.data_mut()[dims.q_row(b, h, i)..][..dh];
                            for (c, o) in dqi.iter_mut().enumerate() {
                                *o = dot(&ds, &kt[c * nk..][..nk]);
                            }
                            for (c, &qc) in qi.iter().enumerate() {
                                axpy(qc, &ds, &mut dkt[c * nk..][..nk]);
                            }
                        }
                        dims.scatter_t(&dkt, b, h, dk.data_mut());
                        dims.scatter_t(&dvt, b, h, dv.data_mut());
                    }
                }
                if need_qk {
                    acc(*q, dq);
                    acc(*k, dk);
                }
                acc(*v, dv);
            }
            Op::MatMulBlocks(a, x) => {
                let [m, n] = self.shape(*a);
                let [xr, d] = self.shape(*x);
                let (av, xv) = (self.value(*a).data(), self.value(*x).data());
                let mut da = Tensor::zeros(m, n);
                let mut dx = Tensor::zeros(xr, d);
                for b in 0..xr / n {
                    let gb = View::dense(b * m * d, m, d, d);
                    let xb = View::dense(b * n * d, n, d, d);
                    if self.requires_grad(*a) {
                        T::gemm_view(T::one(), g.data(), gb, xv, xb.t(), T::one(), da.data_mut(), View::dense(0, m, n, n));
                    }
                    if self.requires_grad(*x) {
                        T::gemm_view(T::one(), av, View::dense(0, m, n, n).t(), g.data(), gb, T::zero(), dx.data_mut(), xb);
                    }
                }
                acc(*a, da);
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); g.cols()];
    for r in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(r)) {
            *o = *o + v;
        }
    }
    Tensor::new(1, g.cols(), out).expect("cols > 0")
}

/// Returns the normalized rows and each row's `1/sqrt(var + eps)`.
fn normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let d = T::from_usize(x.cols()).unwrap();
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let s = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        inv.push(s);
    }
    (out, inv)
}
