//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node to a [`Tape`]; [`Tape::backward`] walks the nodes
//! in reverse and accumulates vector-Jacobian products. A tape can be
//! differentiated once; build a fresh one for the next forward pass.

pub mod conv;

use thiserror::Error;

use crate::tensor::{gemm, Element, Tensor, Trans};
use conv::{ConvGeom, PoolGeom};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape; record a new forward pass")]
    BackwardTwice,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the batch.
    pub var: Vec<T>,
}

enum Op<T: Element> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    AvgPool { x: Var, geom: PoolGeom },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((*n, *c, 1)),
        [n, c, rest @ ..] => Some((*n, *c, rest.iter().product())),
        _ => None,
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as data.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let mut out = vec![T::ZERO; m * n];
        gemm(
            m,
            k,
            n,
            T::ONE,
            self.value(a).data(),
            Trans::No,
            self.value(b).data(),
            Trans::No,
            T::ZERO,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    /// Element-wise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// `x[.., j] + bias[j]`, broadcasting the bias over every leading index.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sb.first().unwrap_or(&0);
        if sb.len() != 1 || sx.last() != Some(&n) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Element-wise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "conv2d",
            lhs: sx.to_vec(),
            rhs: sw.to_vec(),
        };
        let (&[n, c, h, wd], &[o, c2, kh, kw]) = (sx, sw) else {
            return Err(mismatch());
        };
        if c != c2 {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let (Some(oh), Some(ow)) = (
            conv::window_extent(h, kh, stride, padding),
            conv::window_extent(wd, kw, stride, padding),
        ) else {
            return Err(mismatch());
        };
        let geom = ConvGeom {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: wd,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: oh,
            out_w: ow,
        };
        let out = conv::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Average pooling over `kernel x kernel` windows, no padding.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(AutodiffError::InvalidShape {
                shape: s.to_vec(),
                reason: "avg_pool2d expects [N, C, H, W]".into(),
            });
        }
        self.pool(x, kernel, kernel, stride)
    }

    /// Mean over the spatial extent: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let &[_, _, h, w] = s else {
            return Err(AutodiffError::InvalidShape {
                shape: s.to_vec(),
                reason: "global_avg_pool expects [N, C, H, W]".into(),
            });
        };
        self.pool(x, h, w, 1)
    }

    fn pool(&mut self, x: Var, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (Some(oh), Some(ow)) = (
            conv::window_extent(h, kh, stride, 0),
            conv::window_extent(w, kw, stride, 0),
        ) else {
            return Err(AutodiffError::InvalidArgument {
                op: "avg_pool2d",
                reason: format!("window {kh}x{kw} stride {stride} does not fit input {s:?}"),
            });
        };
        let geom = PoolGeom {
            batch: n,
            channels: c,
            in_h: h,
            in_w: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            out_h: oh,
            out_w: ow,
        };
        let out = conv::avg_pool_forward(&geom, self.value(x).data());
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("avg_pool2d", value, Op::AvgPool { x, geom }, &[x])
    }

    /// Batch normalization with statistics of the current batch.
    ///
    /// `x` is `[N, C]` or `[N, C, ...]`; `gamma` and `beta` are `[C]`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, hw) = self.bn_layout(x, gamma, beta)?;
        let count = T::from_usize(n * hw);
        let xs = self.value(x).data();
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        for b in 0..n {
            for ch in 0..c {
                let plane = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                mean[ch] += plane.iter().fold(T::ZERO, |a, &v| a + v);
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        for b in 0..n {
            for ch in 0..c {
                let plane = &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                let mu = mean[ch];
                var[ch] += plane.iter().fold(T::ZERO, |a, &v| a + (v - mu) * (v - mu));
            }
        }
        var.iter_mut().for_each(|v| *v = *v / count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let var_out = self.bn_apply(x, gamma, beta, &mean, inv_std, true, "batch_norm")?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![c],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let inv_std = running_var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false, "batch_norm")
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        let Some((n, c, hw)) = channel_layout(sx) else {
            return Err(AutodiffError::InvalidShape {
                shape: sx.to_vec(),
                reason: "batch_norm expects [N, C, ...]".into(),
            });
        };
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: sx.to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((n, c, hw))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
        name: &'static str,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = channel_layout(&shape).expect("validated by bn_layout");
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut out = vec![T::ZERO; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            name,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let &[b, k] = s else {
            return Err(AutodiffError::InvalidShape {
                shape: s.to_vec(),
                reason: "logits must be [batch, classes]".into(),
            });
        };
        if labels.len() != b {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(AutodiffError::LabelOutOfRange { label: bad, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::ZERO; b * k];
        let mut loss = T::ZERO;
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(row[0], T::max);
            let mut denom = T::ZERO;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p = *p / denom);
            loss += denom.ln() - (row[label] - max);
        }
        let value = Tensor::scalar(loss / T::from_usize(b));
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`. Unreached variables get no entry.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar { shape: shape.to_vec() });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *d;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, up: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let dy = up.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    gemm(m, n, k, T::ONE, dy, Trans::No, self.value(*b).data(), Trans::Yes, T::ZERO, &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    gemm(k, m, n, T::ONE, self.value(*a).data(), Trans::Yes, dy, Trans::No, T::ZERO, &mut db);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, up.clone());
                if self.requires_grad(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![T::ZERO; n];
                    for row in dy.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![n], db).unwrap());
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = dy.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let d = dy.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d).unwrap());
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let d = dy
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), dy[0]));
            }
            Op::Reshape { x } => {
                let g = up.clone().reshape(self.shape(*x)).unwrap();
                self.accumulate(grads, *x, g);
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw).unwrap());
                }
            }
            Op::AvgPool { x, geom } => {
                let dx = conv::avg_pool_backward(geom, dy);
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, hw) = channel_layout(self.shape(*x)).unwrap();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::ZERO; dy.len()];
                    let count = T::from_usize(n * hw);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] = if *train {
                                    // d xhat = dy * gamma, summed terms folded into dbeta/dgamma
                                    g[ch] * inv_std[ch] / count
                                        * (count * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * dy[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta).unwrap());
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = self.shape(*logits)[1];
                let scale = dy[0] / T::from_usize(labels.len());
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &label) in labels.iter().enumerate() {
                    d[i * k + label] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), d).unwrap());
            }
        }
    }
}
