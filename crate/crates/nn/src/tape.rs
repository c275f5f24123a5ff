//! Reverse-mode automatic differentiation over a recorded list of operations.
//!
//! Every forward call appends a node holding its output value and whatever
//! the backward rule needs. [`Tape::backward`] walks the list in exact
//! reverse order, so gradients of a node are complete before it is visited.

use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{split_axis, Tensor};
use crate::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

/// Batch-norm normalization source.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with fixed (running) statistics.
    Eval { mean: &'a [Scalar], var: &'a [Scalar] },
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<Scalar>,
    pub var: Vec<Scalar>,
}

pub const BN_EPS: Scalar = 1e-5;

enum Op {
    Leaf,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var>, rows: usize, inner: usize, out: usize },
    Bmm { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Scalar),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    TransposeLast2 { x: Var, batch: usize, rows: usize, cols: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec, cols: Vec<Scalar> },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<Scalar>, inv_std: Vec<Scalar>, train: bool },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<Scalar> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, retained for leaves and parameters.
pub struct Gradients {
    grads: Vec<Option<Vec<Scalar>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[Scalar]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is retained by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.param(id).value.clone(), Op::Param(id), true)
    }

    /// `y = x W + b` over the last axis of `x`; leading axes are batch axes.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err("affine", format!("x {xs:?}, W {ws:?}")));
        }
        let (inner, out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err("affine", format!("bias {:?}, want [{out}]", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / inner.max(1);
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            1.0,
            MatRef::new(self.value(x).data(), rows, inner),
            MatRef::new(self.value(w).data(), inner, out),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut y,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Affine { x, w, b, rows, inner, out }, ng))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine(x, w, None)
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]` (or `[B, n, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err("bmm", format!("{as_:?} x {bs:?}")));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(shape_err("bmm", format!("{as_:?} x {bs:?} (trans_b={trans_b})")));
        }
        let mut y = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                let a_i = MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k);
                let b_slice = &bv[i * k * n..(i + 1) * k * n];
                let b_i = if trans_b {
                    MatRef::transposed(b_slice, n, k)
                } else {
                    MatRef::new(b_slice, k, n)
                };
                gemm(1.0, a_i, b_i, 0.0, &mut y[i * m * n..(i + 1) * m * n]);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[batch, m, n], y)?, Op::Bmm { a, b, trans_b, batch, m, k, n }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let y: Vec<Scalar> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let y: Vec<Scalar> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: Scalar) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect()).unwrap();
        let ng = self.ng(x);
        self.push(y, Op::Scale(x, c), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(Scalar) -> Scalar, op: Op) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        let ng = self.ng(x);
        self.push(y, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Scalar::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut y = t.data().to_vec();
        for row in y.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Softmax(x), ng))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("{shape:?} axis {axis} [{start}, +{len})")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            y.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&out_shape, y)?, Op::Narrow { x, axis, start }, ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base_shape:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base_shape:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.shape(v)[axis];
                let src = self.value(v).data();
                y.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Reshape(x), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("transpose", format!("{shape:?}")));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = self.value(x).numel() / (rows * cols).max(1);
        let src = self.value(x).data();
        let mut y = vec![0.0; src.len()];
        transpose_blocks(src, &mut y, batch, rows, cols);
        let mut out_shape = shape;
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&out_shape, y)?, Op::TransposeLast2 { x, batch, rows, cols }, ng))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("mean", format!("axis {axis} of {shape:?}")));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in y[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / dim as Scalar;
        y.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&out_shape, y)?, Op::Mean { x, axis }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        // accumulated in f64 so long reductions stay accurate in 32-bit builds
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as Scalar;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// 2-D cross-correlation of `[B, C, H, W]` with `[O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || spec.stride == 0 {
            return Err(shape_err("conv2d", format!("x {xs:?}, kernel {ws:?}")));
        }
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(shape_err("conv2d", format!("input {xs:?} smaller than kernel {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let geo = ConvGeometry { c, h, w: wd, kh, kw, ho, wo, spec };
        let mut cols = vec![0.0; batch * ckk * hw];
        let mut y = vec![0.0; batch * o * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..batch {
                let col = &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw];
                im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], col, &geo);
                let out = &mut y[bi * o * hw..(bi + 1) * o * hw];
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oc, row) in out.chunks_exact_mut(hw).enumerate() {
                        row.fill(bv[oc]);
                    }
                }
                gemm(
                    1.0,
                    MatRef::new(wv, o, ckk),
                    MatRef::new(col, ckk, hw),
                    if b.is_some() { 1.0 } else { 0.0 },
                    out,
                );
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::new(&[batch, o, ho, wo], y)?,
            Op::Conv2d { x, w, b, spec, cols },
            ng,
        ))
    }

    /// Non-overlapping `k x k` max pooling; trailing rows/columns are dropped.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || xs[2] < k || xs[3] < k {
            return Err(shape_err("maxpool2d", format!("{xs:?} with window {k}")));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / k, w / k);
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(batch * c * ho * wo);
        let mut argmax = Vec::with_capacity(batch * c * ho * wo);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * k * w + ow * k;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = base + (oh * k + i) * w + ow * k + j;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[batch, c, ho, wo], y)?, Op::MaxPool2d { x, argmax }, ng))
    }

    /// Per-channel batch normalization of `[B, C, ...]`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running estimates.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err(
                "batchnorm",
                format!("x {xs:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (batch, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let count = (batch * spatial) as Scalar;
        let src = self.value(x).data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for bi in 0..batch {
                        let base = (bi * c + ch) * spatial;
                        s += src[base..base + spatial].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0f64;
                    for bi in 0..batch {
                        let base = (bi * c + ch) * spatial;
                        ss += src[base..base + spatial].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
                    }
                    mean[ch] = m as Scalar;
                    var[ch] = (ss / count as f64) as Scalar;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batchnorm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<Scalar> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut y = vec![0.0; src.len()];
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * spatial;
                for i in base..base + spatial {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    y[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            Tensor::new(&xs, y)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            ng,
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(shape_err("cross_entropy", format!("logits {shape:?}, {} labels", labels.len())));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::LabelRange { label, classes });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<Scalar>().ln() + max;
            loss += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / batch as Scalar),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<Scalar>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every recorded parameter into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads.get(i).and_then(|g| g.as_ref())) {
                for (acc, v) in store.param_mut(*id).grad.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<Scalar>>], v: Var) -> &'g mut Vec<Scalar> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backprop(&self, i: usize, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b, rows, inner, out } => {
                let (rows, inner, out) = (*rows, *inner, *out);
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    let dx = self.buf(grads, *x);
                    gemm(1.0, MatRef::new(g, rows, out), MatRef::transposed(wv, inner, out), 1.0, dx);
                }
                if self.ng(*w) {
                    let xv = self.value(*x).data();
                    let dw = self.buf(grads, *w);
                    gemm(1.0, MatRef::transposed(xv, rows, inner), MatRef::new(g, rows, out), 1.0, dw);
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let db = self.buf(grads, b);
                    for row in g.chunks_exact(out) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    let da = self.buf(grads, *a);
                    for bi in 0..*batch {
                        let bs = &bv[bi * k * n..(bi + 1) * k * n];
                        let b_t = if *trans_b { MatRef::new(bs, n, k) } else { MatRef::transposed(bs, k, n) };
                        gemm(
                            1.0,
                            MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            b_t,
                            1.0,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let db = self.buf(grads, *b);
                    for bi in 0..*batch {
                        let a_i = &av[bi * m * k..(bi + 1) * m * k];
                        let g_i = &g[bi * m * n..(bi + 1) * m * n];
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm(1.0, MatRef::transposed(g_i, m, n), MatRef::new(a_i, m, k), 1.0, out);
                        } else {
                            gemm(1.0, MatRef::transposed(a_i, m, k), MatRef::new(g_i, m, n), 1.0, out);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        add_into(self.buf(grads, v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    for ((acc, gv), bv) in self.buf(grads, *a).iter_mut().zip(g).zip(bv) {
                        *acc += gv * bv;
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    for ((acc, gv), av) in self.buf(grads, *b).iter_mut().zip(g).zip(av) {
                        *acc += gv * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (acc, gv) in self.buf(grads, *x).iter_mut().zip(g) {
                    *acc += gv * c;
                }
            }
            Op::Sigmoid(x) => {
                for ((acc, gv), yv) in self.buf(grads, *x).iter_mut().zip(g).zip(y) {
                    *acc += gv * yv * (1.0 - yv);
                }
            }
            Op::Tanh(x) => {
                for ((acc, gv), yv) in self.buf(grads, *x).iter_mut().zip(g).zip(y) {
                    *acc += gv * (1.0 - yv * yv);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                for ((acc, gv), xv) in self.buf(grads, *x).iter_mut().zip(g).zip(xv) {
                    if *xv > 0.0 {
                        *acc += gv;
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = *node.value.shape().last().unwrap();
                let dx = self.buf(grads, *x);
                for ((dxr, gr), yr) in dx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)) {
                    let dot: Scalar = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((acc, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                        *acc += yv * (gv - dot);
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let dx = self.buf(grads, *x);
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    add_into(&mut dx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let d = self.shape(v)[*axis];
                    if self.ng(v) {
                        let dx = self.buf(grads, v);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            add_into(&mut dx[o * d * inner..(o + 1) * d * inner], src);
                        }
                    }
                    offset += d;
                }
            }
            Op::Reshape(x) => add_into(self.buf(grads, *x), g),
            Op::TransposeLast2 { x, batch, rows, cols } => {
                let mut t = vec![0.0; g.len()];
                transpose_blocks(g, &mut t, *batch, *cols, *rows);
                add_into(self.buf(grads, *x), &t);
            }
            Op::Mean { x, axis } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let inv = 1.0 / dim as Scalar;
                let dx = self.buf(grads, *x);
                for o in 0..outer {
                    for d in 0..dim {
                        let row = &mut dx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (acc, gv) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *acc += gv * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                for acc in self.buf(grads, *x).iter_mut() {
                    *acc += gv;
                }
            }
            Op::Conv2d { x, w, b, spec, cols } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let ckk = c * kh * kw;
                let hw = ho * wo;
                let geo = ConvGeometry { c, h, w: wd, kh, kw, ho, wo, spec: *spec };
                if self.ng(*w) {
                    let dw = self.buf(grads, *w);
                    for bi in 0..batch {
                        gemm(
                            1.0,
                            MatRef::new(&g[bi * o * hw..(bi + 1) * o * hw], o, hw),
                            MatRef::transposed(&cols[bi * ckk * hw..(bi + 1) * ckk * hw], ckk, hw),
                            1.0,
                            dw,
                        );
                    }
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let db = self.buf(grads, b);
                    for bi in 0..batch {
                        for (oc, row) in g[bi * o * hw..(bi + 1) * o * hw].chunks_exact(hw).enumerate() {
                            db[oc] += row.iter().sum::<Scalar>();
                        }
                    }
                }
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    let mut dcol = vec![0.0; ckk * hw];
                    let dx = self.buf(grads, *x);
                    for bi in 0..batch {
                        gemm(
                            1.0,
                            MatRef::transposed(wv, o, ckk),
                            MatRef::new(&g[bi * o * hw..(bi + 1) * o * hw], o, hw),
                            0.0,
                            &mut dcol,
                        );
                        col2im_add(&dcol, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd], &geo);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let dx = self.buf(grads, *x);
                for (gv, &idx) in g.iter().zip(argmax) {
                    dx[idx] += gv;
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*x);
                let (batch, c) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let count = (batch * spatial) as Scalar;
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * spatial;
                        for i in base..base + spatial {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.ng(*gamma) {
                    add_into(self.buf(grads, *gamma), &sum_gx);
                }
                if self.ng(*beta) {
                    add_into(self.buf(grads, *beta), &sum_g);
                }
                if self.ng(*x) {
                    let dx = self.buf(grads, *x);
                    for bi in 0..batch {
                        for ch in 0..c {
                            let base = (bi * c + ch) * spatial;
                            let k = gm[ch] * inv_std[ch];
                            for i in base..base + spatial {
                                dx[i] += if *train {
                                    k * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as Scalar;
                let dx = self.buf(grads, *logits);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..classes {
                        let target = if j == label { 1.0 } else { 0.0 };
                        dx[r * classes + j] += scale * (probs[r * classes + j] - target);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(v: Scalar) -> Scalar {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [Scalar]) {
    let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn add_into(dst: &mut [Scalar], src: &[Scalar]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_blocks(src: &[Scalar], dst: &mut [Scalar], batch: usize, rows: usize, cols: usize) {
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut dst[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl ConvGeometry {
    /// Input coordinate for an output position and kernel offset, if inside the image.
    #[inline]
    fn source(&self, oh: usize, ow: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.spec.stride + ki).checked_sub(self.spec.padding)?;
        let iw = (ow * self.spec.stride + kj).checked_sub(self.spec.padding)?;
        (ih < self.h && iw < self.w).then_some((ih, iw))
    }
}

fn im2col(x: &[Scalar], cols: &mut [Scalar], g: &ConvGeometry) {
    let hw = g.ho * g.wo;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ch * g.kh + ki) * g.kw + kj) * hw;
                for oh in 0..g.ho {
                    for ow in 0..g.wo {
                        cols[row + oh * g.wo + ow] = match g.source(oh, ow, ki, kj) {
                            Some((ih, iw)) => x[(ch * g.h + ih) * g.w + iw],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[Scalar], dx: &mut [Scalar], g: &ConvGeometry) {
    let hw = g.ho * g.wo;
    for ch in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ch * g.kh + ki) * g.kw + kj) * hw;
                for oh in 0..g.ho {
                    for ow in 0..g.wo {
                        if let Some((ih, iw)) = g.source(oh, ow, ki, kj) {
                            dx[(ch * g.h + ih) * g.w + iw] += cols[row + oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}
