//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the tape: every op appends one node holding its output
//! value and enough saved state to run its backward rule. Nodes are only ever
//! appended, so node order is a topological order and [`Graph::backward`]
//! visits each node once, in reverse.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp applied to probabilities inside the log-likelihood losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Focal {
        pred: Var,
        target: Vec<T>,
        alpha: T,
        beta: T,
    },
    Bce {
        pred: Var,
        target: T,
        pos_weight: T,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The operation tape. One graph per forward pass; single-threaded.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradient requirements. Backward on it
    /// yields no parameter gradients.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
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
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = if store.is_frozen(id) {
            self.constant(store.get(id).clone())
        } else {
            self.variable(store.get(id).clone())
        };
        self.params.insert(id, v);
        v
    }

    /// Makes later [`Self::param`] calls for `id` return `v`. Used to drive a
    /// model from externally supplied leaves, e.g. in gradient checks.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(t, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// `a[m×n] + row[n]` with the row repeated over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        if self.value(row).numel() != n {
            return Err(Error::dim(
                "add_row",
                format!("[{m}x{n}] + row of {}", self.value(row).numel()),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(a, row), &[a, row]))
    }

    /// `a[C×H×W] + bias[C]` with each channel's bias repeated spatially.
    pub fn add_channel(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3("add_channel")?;
        if self.value(bias).numel() != c {
            return Err(Error::dim(
                "add_channel",
                format!("{c} channels vs bias of {}", self.value(bias).numel()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (ch, chunk) in data.chunks_mut(h * w).enumerate() {
            for x in chunk {
                *x += b[ch];
            }
        }
        Ok(self.push(Tensor::new(vec![c, h, w], data)?, Op::AddChannel(a, bias), &[a, bias]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), T::ln)
    }

    // ---- row-wise -------------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("softmax_rows")?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::SoftmaxRows(a), &[a]))
    }

    /// Normalizes every row of `x[m×n]` to zero mean and unit variance, then
    /// applies per-column `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2("layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim("layer_norm", "gain/bias width mismatch"));
        }
        let eps = T::of(eps);
        let nn = T::of(n as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xv.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_rows")?;
        if start + len > m {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::new(vec![len, n], data)?, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if start + len > n {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} of {n}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for row in src.chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(Tensor::new(vec![m, len], data)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no inputs"));
        }
        let n = self.value(parts[0]).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.value(p).dims2("concat_rows")?;
            if c != n {
                return Err(Error::dim("concat_rows", format!("width {c} vs {n}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no inputs"));
        }
        let m = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", format!("height {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Selects rows of `x[m×n]` by index, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2("gather_rows")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= m {
                return Err(Error::dim("gather_rows", format!("row {i} of {m}")));
            }
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Tensor::new(vec![index.len(), n], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    // ---- spatial ----------------------------------------------------------

    /// Cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×k×k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).dims3("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, wc_in, k, k2] = ws[..] else {
            return Err(Error::dim("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if wc_in != c_in || k != k2 {
            return Err(Error::dim("conv2d", format!("input channels {c_in}, weight {ws:?}")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {k} larger than padded input {}x{}",
                    h + 2 * padding,
                    wd + 2 * padding
                ),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad: padding,
            h_out: (h + 2 * padding - k) / stride + 1,
            w_out: (wd + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        Ok(self.push(
            Tensor::new(vec![c_out, geom.h_out, geom.w_out], out)?,
            Op::Conv2d { x, w, geom },
            &[x, w],
        ))
    }

    /// Bilinear upsampling of `x[C×H×W]` by an integer factor, half-pixel
    /// centers, edge-clamped.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::Argument(format!("upsample factor {factor} < 1")));
        }
        let (c, h, w) = self.value(x).dims3("upsample")?;
        let out = if factor == 1 {
            self.value(x).data().to_vec()
        } else {
            kernels::resample_forward(self.value(x).data(), c, (h, w), (h * factor, w * factor))
        };
        Ok(self.push(
            Tensor::new(vec![c, h * factor, w * factor], out)?,
            Op::Upsample { x, factor },
            &[x],
        ))
    }

    // ---- fused losses -------------------------------------------------------

    /// Pixel-wise focal loss averaged over all elements:
    /// `-(1/n) Σ [Y=1] (1-p)^α log p + [Y≠1] (1-Y)^β p^α log(1-p)`.
    ///
    /// `p` at or outside 0 or 1 is replaced by `PROB_EPS` or `1-PROB_EPS`;
    /// the backward rule is the derivative evaluated at the replaced value.
    pub fn focal_loss(&mut self, pred: Var, target: &Tensor<T>, alpha: f64, beta: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim(
                "focal_loss",
                format!("pred {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let (a, b) = (T::of(alpha), T::of(beta));
        let p = self.value(pred).data();
        let n = T::of(p.len() as f64);
        let mut total = T::zero();
        for (&pv, &y) in p.iter().zip(target.data()) {
            total += focal_term(clamp_prob(pv), y, a, b);
        }
        let loss = -total / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                pred,
                target: target.data().to_vec(),
                alpha: a,
                beta: b,
            },
            &[pred],
        ))
    }

    /// Weighted binary cross-entropy of one probability:
    /// `-w·τ·log p - (1-τ)·log(1-p)`, with the same clamp as [`Self::focal_loss`].
    pub fn bce(&mut self, pred: Var, target: f64, pos_weight: f64) -> Result<Var> {
        if self.value(pred).numel() != 1 {
            return Err(Error::dim(
                "bce",
                format!("expected one element, got {:?}", self.shape(pred)),
            ));
        }
        let (t, w) = (T::of(target), T::of(pos_weight));
        let p = clamp_prob(self.value(pred).item());
        let loss = -w * t * p.ln() - (T::one() - t) * (T::one() - p).ln();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: t,
                pos_weight: w,
            },
            &[pred],
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse-mode accumulation from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = dims2(&self.nodes[b.0].value).1;
                if let Some(ga) = self.slot(*a, grads) {
                    kernels::matmul_nt_acc(gy, self.nodes[b.0].value.data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    kernels::matmul_tn_acc(self.nodes[a.0].value.data(), gy, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(&node.value);
                let t = kernels::transpose(gy, r, c);
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, &t, T::one());
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, gy, T::one());
                }
                if let Some(gb) = self.slot(*b, grads) {
                    axpy(gb, gy, T::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, gy, T::one());
                }
                if let Some(gb) = self.slot(*b, grads) {
                    axpy(gb, gy, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for ((g, &d), &bv) in ga.iter_mut().zip(gy).zip(self.nodes[b.0].value.data()) {
                        *g += d * bv;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((g, &d), &av) in gb.iter_mut().zip(gy).zip(self.nodes[a.0].value.data()) {
                        *g += d * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, gy, *s);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, gy, T::one());
                }
                let n = dims2(&node.value).1;
                if let Some(gr) = self.slot(*row, grads) {
                    for chunk in gy.chunks(n) {
                        axpy(gr, chunk, T::one());
                    }
                }
            }
            Op::AddChannel(a, bias) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, gy, T::one());
                }
                let s = node.value.shape();
                let hw = s[1] * s[2];
                if let Some(gb) = self.slot(*bias, grads) {
                    for (ch, chunk) in gy.chunks(hw).enumerate() {
                        gb[ch] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for ((g, &d), &yv) in ga.iter_mut().zip(gy).zip(y) {
                        if yv > T::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for ((g, &d), &yv) in ga.iter_mut().zip(gy).zip(y) {
                        *g += d * yv * (T::one() - yv);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for ((g, &d), &yv) in ga.iter_mut().zip(gy).zip(y) {
                        *g += d * yv;
                    }
                }
            }
            Op::Log(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for ((g, &d), &xv) in ga.iter_mut().zip(gy).zip(self.nodes[a.0].value.data()) {
                        *g += d / xv;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = dims2(&node.value).1;
                if let Some(ga) = self.slot(*a, grads) {
                    for ((g_row, d_row), y_row) in ga.chunks_mut(n).zip(gy.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = d_row.iter().zip(y_row).map(|(&d, &yv)| d * yv).sum();
                        for ((g, &d), &yv) in g_row.iter_mut().zip(d_row).zip(y_row) {
                            *g += yv * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = dims2(&node.value).1;
                let g = self.nodes[gain.0].value.data().to_vec();
                if let Some(gb) = self.slot(*bias, grads) {
                    for chunk in gy.chunks(n) {
                        axpy(gb, chunk, T::one());
                    }
                }
                if let Some(gg) = self.slot(*gain, grads) {
                    for (d_row, h_row) in gy.chunks(n).zip(xhat.chunks(n)) {
                        for ((s, &d), &h) in gg.iter_mut().zip(d_row).zip(h_row) {
                            *s += d * h;
                        }
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    let nn = T::of(n as f64);
                    for (r, (d_row, h_row)) in gy.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<T> = d_row.iter().zip(&g).map(|(&d, &gv)| d * gv).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(h_row).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[r] / nn;
                        for j in 0..n {
                            gx[r * n + j] += scale * (nn * dh[j] - sum_dh - h_row[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for g in ga.iter_mut() {
                        *g += gy[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    let d = gy[0] / T::of(ga.len() as f64);
                    for g in ga.iter_mut() {
                        *g += d;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, gy, T::one());
                }
            }
            Op::SliceRows { x, start } => {
                let n = dims2(&node.value).1;
                if let Some(gx) = self.slot(*x, grads) {
                    axpy(&mut gx[start * n..start * n + gy.len()], gy, T::one());
                }
            }
            Op::SliceCols { x, start } => {
                let len = dims2(&node.value).1;
                let n = dims2(&self.nodes[x.0].value).1;
                if let Some(gx) = self.slot(*x, grads) {
                    for (r, d_row) in gy.chunks(len).enumerate() {
                        axpy(&mut gx[r * n + start..r * n + start + len], d_row, T::one());
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if let Some(gp) = self.slot(*p, grads) {
                        axpy(gp, &gy[offset..offset + len], T::one());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = dims2(&node.value).1;
                let mut col = 0;
                for p in parts {
                    let (m, c) = dims2(&self.nodes[p.0].value);
                    if let Some(gp) = self.slot(*p, grads) {
                        for r in 0..m {
                            axpy(
                                &mut gp[r * c..(r + 1) * c],
                                &gy[r * total + col..r * total + col + c],
                                T::one(),
                            );
                        }
                    }
                    col += c;
                }
            }
            Op::GatherRows { x, index } => {
                let n = dims2(&node.value).1;
                if let Some(gx) = self.slot(*x, grads) {
                    for (r, &src) in index.iter().enumerate() {
                        axpy(&mut gx[src * n..(src + 1) * n], &gy[r * n..(r + 1) * n], T::one());
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                // Two disjoint slots; take them out to satisfy the borrow checker.
                let mut gx_buf = if need_x {
                    Some(grads[x.0].take().unwrap_or_else(|| vec![T::zero(); xv.len()]))
                } else {
                    None
                };
                let mut gw_buf = if need_w {
                    Some(grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wv.len()]))
                } else {
                    None
                };
                kernels::conv2d_backward(xv, wv, gy, geom, gx_buf.as_deref_mut(), gw_buf.as_deref_mut());
                if let Some(g) = gx_buf {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gw_buf {
                    grads[w.0] = Some(g);
                }
            }
            Op::Upsample { x, factor } => {
                let (c, h, w) = dims3(&self.nodes[x.0].value);
                if let Some(gx) = self.slot(*x, grads) {
                    if *factor == 1 {
                        axpy(gx, gy, T::one());
                    } else {
                        kernels::resample_backward(gy, gx, c, (h, w), (h * factor, w * factor));
                    }
                }
            }
            Op::Focal {
                pred,
                target,
                alpha,
                beta,
            } => {
                let p = self.nodes[pred.0].value.data();
                let scale = -gy[0] / T::of(p.len() as f64);
                if let Some(gp) = self.slot(*pred, grads) {
                    for ((g, &pv), &yv) in gp.iter_mut().zip(p).zip(target) {
                        *g += scale * focal_term_grad(clamp_prob(pv), yv, *alpha, *beta);
                    }
                }
            }
            Op::Bce {
                pred,
                target,
                pos_weight,
            } => {
                let p = clamp_prob(self.nodes[pred.0].value.item());
                let d = -*pos_weight * *target / p + (T::one() - *target) / (T::one() - p);
                if let Some(gp) = self.slot(*pred, grads) {
                    gp[0] += gy[0] * d;
                }
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first use, or `None` when `v`
    /// does not need gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a bound parameter; `None` when the
    /// parameter was not used or is frozen.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Adds every parameter gradient into `acc`, indexed by parameter id.
    pub fn accumulate_into(&self, acc: &mut [Option<Tensor<T>>]) {
        let mut bound: Vec<(&ParamId, &Var)> = self.params.iter().collect();
        bound.sort();
        for (id, &v) in bound {
            if let Some(g) = self.get(v) {
                match &mut acc[id.0] {
                    Some(a) => axpy(a.data_mut(), g.data(), T::one()),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], s: T) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1])
}

fn dims3<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[inline]
fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::of(PROB_EPS);
    if p > T::zero() && p < T::one() {
        p
    } else if p >= T::one() {
        T::one() - eps
    } else {
        eps
    }
}

#[inline]
fn focal_term<T: Scalar>(p: T, y: T, alpha: T, beta: T) -> T {
    if y == T::one() {
        (T::one() - p).powf(alpha) * p.ln()
    } else {
        (T::one() - y).powf(beta) * p.powf(alpha) * (T::one() - p).ln()
    }
}

#[inline]
fn focal_term_grad<T: Scalar>(p: T, y: T, alpha: T, beta: T) -> T {
    let one = T::one();
    if y == one {
        let q = one - p;
        // d/dp (1-p)^α log p
        -alpha * q.powf(alpha - one) * p.ln() + q.powf(alpha) / p
    } else {
        // d/dp (1-Y)^β p^α log(1-p)
        let w = (one - y).powf(beta);
        w * (alpha * p.powf(alpha - one) * (one - p).ln() - p.powf(alpha) / (one - p))
    }
}
