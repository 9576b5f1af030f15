//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Gradients are
//! kept for leaves only.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation together with whatever the backward pass needs.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        x: Var,
        alpha: T,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Log {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddScalar {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    L1Distance {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Column {
        x: Var,
        col: usize,
    },
    CrossEntropy {
        logits: Var,
        /// Class per pixel, `None` for ignored pixels.
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        counted: usize,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Log { .. } => "log",
            Op::Clamp { .. } => "clamp",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Dropout { .. } => "dropout",
            Op::Softmax { .. } => "softmax",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L1Distance { .. } => "l1_distance",
            Op::Concat { .. } => "concat",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Column { .. } => "column",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Element>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn dims4<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    t.expect_rank(4, what)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    pub fn ops(&self) -> impl Iterator<Item = &Op<T>> {
        self.nodes.iter().map(|n| &n.op)
    }

    /// Clears leaf gradients and re-arms `backward`.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Hash of every branch decision taken by the piecewise ops. Two forward
    /// passes with equal fingerprints lie on the same smooth piece.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::LeakyRelu { x, .. } => {
                    for v in self.nodes[x.0].value.data() {
                        (*v >= T::zero()).hash(&mut h);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for v in self.nodes[x.0].value.data() {
                        (*v < *lo, *v > *hi).hash(&mut h);
                    }
                }
                Op::L1Distance { a, b } => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    for (x, y) in av.iter().zip(bv) {
                        (x.partial_cmp(y)).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ------------------------------------------------------------------
    // Convolutions

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x), "conv2d input")?;
        let (o, wi, k, k2) = dims4(self.value(w), "conv2d weight")?;
        if wi != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels but weight expects {wi}"
            )));
        }
        if k != k2 {
            return Err(Error::Shape(format!("conv2d: non-square kernel {k}x{k2}")));
        }
        if stride == 0 {
            return Err(Error::Param("conv2d: stride must be >= 1".into()));
        }
        if k > h + 2 * padding || k > wd + 2 * padding {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} exceeds padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!(
                    "conv2d: bias shape {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
        };
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let mut out = vec![T::zero(); n * o * oh * ow];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for (i, chunk) in out.chunks_mut(o * oh * ow).enumerate() {
                let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                kernels::conv2d_single(&geom, xi, wv, bv, o, chunk);
            }
        }
        let value = Tensor::new([n, o, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            value,
            &inputs,
        )
    }

    /// Transposed convolution; `w` is laid out `in × out × K × K`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x), "conv_transpose2d input")?;
        let (wi, o, k, k2) = dims4(self.value(w), "conv_transpose2d weight")?;
        if wi != c {
            return Err(Error::Shape(format!(
                "conv_transpose2d: input has {c} channels but weight expects {wi}"
            )));
        }
        if k != k2 {
            return Err(Error::Shape(format!(
                "conv_transpose2d: non-square kernel {k}x{k2}"
            )));
        }
        if stride == 0 {
            return Err(Error::Param("conv_transpose2d: stride must be >= 1".into()));
        }
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(Error::Shape(format!(
                "conv_transpose2d: padding {padding} leaves an empty output"
            )));
        }
        let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!(
                    "conv_transpose2d: bias shape {:?}, expected [{o}]",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            channels: o,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            padding,
        };
        let kk = geom.col_rows();
        let p = h * wd;
        let mut out = vec![T::zero(); n * o * oh * ow];
        {
            let xv = self.value(x).data();
            let w_t = kernels::transpose(c, kk, self.value(w).data());
            let bv = b.map(|b| self.value(b).data());
            for (i, chunk) in out.chunks_mut(o * oh * ow).enumerate() {
                if let Some(bv) = bv {
                    for (ch, plane) in chunk.chunks_mut(oh * ow).enumerate() {
                        plane.fill(bv[ch]);
                    }
                }
                let xi = &xv[i * c * p..(i + 1) * c * p];
                let mut cols = vec![T::zero(); kk * p];
                kernels::gemm_acc(kk, c, p, &w_t, xi, &mut cols);
                kernels::col2im(&geom, &cols, chunk);
            }
        }
        let value = Tensor::new([n, o, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            value,
            &inputs,
        )
    }

    // ------------------------------------------------------------------
    // Elementwise

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(alpha >= 0.0) {
            return Err(Error::Param(format!(
                "leaky_relu: alpha must be >= 0, got {alpha}"
            )));
        }
        let a = T::lit(alpha);
        let value = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { a * v });
        self.push(Op::LeakyRelu { x, alpha: a }, value, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh { x }, value, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(Op::Sigmoid { x }, value, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.ln());
        self.push(Op::Log { x }, value, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Param(format!("clamp: empty range [{lo}, {hi}]")));
        }
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(Op::Clamp { x, lo, hi }, value, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        let value = self.value(x).map(|v| v * f);
        self.push(Op::Scale { x, factor: f }, value, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar { x }, value, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        same_shape(op.name(), self.value(a), self.value(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(op, value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity when not
    /// training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!(
                "dropout: probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Dropout { x, mask }, value, &[x])
    }

    // ------------------------------------------------------------------
    // Normalization and reductions

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "instance_norm input")?;
        if !(eps > 0.0) {
            return Err(Error::Param(format!("instance_norm: eps must be > 0, got {eps}")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "instance_norm: gamma/beta shapes {:?}/{:?}, expected [{c}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let m = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); xv.len()];
        for plane_idx in 0..n * c {
            let ch = plane_idx % c;
            let src = &xv[plane_idx * m..(plane_idx + 1) * m];
            let mean = src.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / m as f64;
            let var = src
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[plane_idx] = T::lit(istd);
            let (g, b) = (gv[ch], bv[ch]);
            for i in 0..m {
                let xh = T::lit((src[i].to_f64_lossy() - mean) * istd);
                xhat[plane_idx * m + i] = xh;
                out[plane_idx * m + i] = g * xh + b;
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        self.push(
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            &[x, gamma, beta],
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(xv[at(k)]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (xv[at(k)] - mx).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(Op::Softmax { x, axis }, value, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum { x }, value, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(xv.mean());
        self.push(Op::Mean { x }, value, &[x])
    }

    /// Mean absolute difference `mean(|a - b|)`.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("l1_distance", self.value(a), self.value(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if av.is_empty() {
            return Err(Error::Shape("l1_distance of empty tensors".into()));
        }
        let total: T = av.iter().zip(bv).map(|(&x, &y)| (x - y).abs()).sum();
        let value = Tensor::scalar(total / T::lit(av.len() as f64));
        self.push(Op::L1Distance { a, b }, value, &[a, b])
    }

    /// Concatenation of rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (n, _, h, w) = dims4(self.value(*first), "concat")?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = dims4(self.value(p), "concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat: part shape {:?} incompatible with {:?}",
                    self.shape(p),
                    self.shape(*first)
                )));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(
                    &self.value(p).data()[b * pc * plane..(b + 1) * pc * plane],
                );
            }
        }
        let value = Tensor::new([n, total_c, h, w], out)?;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            value,
            parts,
        )
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "global_avg_pool")?;
        let m = T::lit((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|pl| pl.iter().copied().sum::<T>() / m)
            .collect();
        let value = Tensor::new([n, c], data)?;
        self.push(Op::GlobalAvgPool { x }, value, &[x])
    }

    /// Affine map `x·wᵀ + b` with `x: N×F`, `w: O×F`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.value(x).expect_rank(2, "linear input")?;
        self.value(w).expect_rank(2, "linear weight")?;
        let (n, f) = (self.shape(x)[0], self.shape(x)[1]);
        let (o, wf) = (self.shape(w)[0], self.shape(w)[1]);
        if wf != f || self.shape(b) != [o] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); n * o];
        let bv = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bv);
        }
        let w_t = kernels::transpose(o, f, self.value(w).data());
        kernels::gemm_acc(n, f, o, self.value(x).data(), &w_t, &mut out);
        let value = Tensor::new([n, o], out)?;
        self.push(Op::Linear { x, w, b }, value, &[x, w, b])
    }

    /// Column `col` of a rank-2 tensor.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        self.value(x).expect_rank(2, "column")?;
        let (n, k) = (self.shape(x)[0], self.shape(x)[1]);
        if col >= k {
            return Err(Error::Shape(format!("column {col} out of range for width {k}")));
        }
        let data = (0..n).map(|i| self.value(x).data()[i * k + col]).collect();
        let value = Tensor::new([n], data)?;
        self.push(Op::Column { x, col }, value, &[x])
    }

    /// Mean pixel-wise cross-entropy of `N×C×H×W` logits against `N×H×W`
    /// class indices. Pixels equal to `ignore` are skipped. Returns the loss
    /// and the number of pixels that contributed; with zero contributing
    /// pixels the loss is defined as 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        ignore: Option<usize>,
    ) -> Result<(Var, usize)> {
        let (n, c, h, w) = dims4(self.value(logits), "cross_entropy logits")?;
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for {}x{}x{} pixels",
                labels.len(),
                n,
                h,
                w
            )));
        }
        let mut targets = Vec::with_capacity(labels.len());
        for (i, &l) in labels.iter().enumerate() {
            if Some(l) == ignore {
                targets.push(None);
            } else if l >= c {
                let (b, rem) = (i / plane, i % plane);
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: c,
                    n: b,
                    y: rem / w,
                    x: rem % w,
                });
            } else {
                targets.push(Some(l));
            }
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        let mut counted = 0usize;
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for k in 0..c {
                    mx = mx.max(lv[base + k * plane + p]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (lv[base + k * plane + p] - mx).exp();
                    probs[base + k * plane + p] = e;
                    z = z + e;
                }
                for k in 0..c {
                    probs[base + k * plane + p] = probs[base + k * plane + p] / z;
                }
                if let Some(t) = targets[b * plane + p] {
                    let lse = mx + z.ln();
                    total += (lse - lv[base + t * plane + p]).to_f64_lossy();
                    counted += 1;
                }
            }
        }
        let loss = if counted == 0 {
            0.0
        } else {
            total / counted as f64
        };
        let value = Tensor::scalar(T::lit(loss));
        let v = self.push(
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                counted,
            },
            value,
            &[logits],
        )?;
        Ok((v, counted))
    }

    // ------------------------------------------------------------------
    // Reverse sweep

    /// Populates gradients of `loss` on every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "gradients already computed; call zero_grad() before another backward".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(gout);
                continue;
            }
            self.backprop_node(i, &gout, &mut grads)?;
        }
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(
        &self,
        i: usize,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let gy = gout.data();
        let name = node.op.name();
        let mut sink = GradSink {
            nodes: &self.nodes,
            grads,
            op: name,
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let s = xv.shape();
                let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
                let o = wv.shape()[0];
                let geom = ConvGeom {
                    channels: c,
                    height: h,
                    width: wd,
                    kernel: wv.shape()[2],
                    stride: *stride,
                    padding: *padding,
                };
                let p = geom.col_cols();
                let want_x = sink.wants(*x);
                let want_w = sink.wants(*w);
                let mut dx = want_x.then(|| vec![T::zero(); xv.numel()]);
                let mut dw = want_w.then(|| vec![T::zero(); wv.numel()]);
                for bi in 0..n {
                    let dxi = dx
                        .as_mut()
                        .map(|d| &mut d[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    kernels::conv2d_backward_single(
                        &geom,
                        &xv.data()[bi * c * h * wd..(bi + 1) * c * h * wd],
                        wv.data(),
                        o,
                        &gy[bi * o * p..(bi + 1) * o * p],
                        dxi,
                        dw.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    sink.add_vec(*x, dx)?;
                }
                if let Some(dw) = dw {
                    sink.add_vec(*w, dw)?;
                }
                if let Some(b) = b {
                    if sink.wants(*b) {
                        sink.add_vec(*b, channel_sums(gy, n, o, p))?;
                    }
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let s = xv.shape();
                let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
                let os = gout.shape();
                let (o, oh, ow) = (os[1], os[2], os[3]);
                let geom = ConvGeom {
                    channels: o,
                    height: oh,
                    width: ow,
                    kernel: wv.shape()[2],
                    stride: *stride,
                    padding: *padding,
                };
                let kk = geom.col_rows();
                let p = h * wd;
                let want_x = sink.wants(*x);
                let want_w = sink.wants(*w);
                let mut dx = want_x.then(|| vec![T::zero(); xv.numel()]);
                let mut dw = want_w.then(|| vec![T::zero(); wv.numel()]);
                for bi in 0..n {
                    let gyi = &gy[bi * o * oh * ow..(bi + 1) * o * oh * ow];
                    let colg = kernels::im2col(&geom, gyi);
                    if let Some(dx) = dx.as_mut() {
                        kernels::gemm_acc(
                            c,
                            kk,
                            p,
                            wv.data(),
                            &colg,
                            &mut dx[bi * c * p..(bi + 1) * c * p],
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        let colg_t = kernels::transpose(kk, p, &colg);
                        kernels::gemm_acc(
                            c,
                            p,
                            kk,
                            &xv.data()[bi * c * p..(bi + 1) * c * p],
                            &colg_t,
                            dw,
                        );
                    }
                }
                if let Some(dx) = dx {
                    sink.add_vec(*x, dx)?;
                }
                if let Some(dw) = dw {
                    sink.add_vec(*w, dw)?;
                }
                if let Some(b) = b {
                    if sink.wants(*b) {
                        sink.add_vec(*b, channel_sums(gy, n, o, oh * ow))?;
                    }
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let xv = self.value(*x).data();
                let d = gy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v >= T::zero() { g } else { g * *alpha })
                    .collect();
                sink.add_vec(*x, d)?;
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let d = gy
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * (T::one() - y * y))
                    .collect();
                sink.add_vec(*x, d)?;
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let d = gy
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                sink.add_vec(*x, d)?;
            }
            Op::Log { x } => {
                let xv = self.value(*x).data();
                let d = gy.iter().zip(xv).map(|(&g, &v)| g / v).collect();
                sink.add_vec(*x, d)?;
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d = gy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v < *lo || v > *hi { T::zero() } else { g })
                    .collect();
                sink.add_vec(*x, d)?;
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = self.shape(*x);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let m = h * w;
                let gv = self.value(*gamma).data();
                let mut dx = vec![T::zero(); n * c * m];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for plane in 0..n * c {
                    let ch = plane % c;
                    let dy = &gy[plane * m..(plane + 1) * m];
                    let xh = &xhat[plane * m..(plane + 1) * m];
                    let mut s_dy = 0.0f64;
                    let mut s_dy_xh = 0.0f64;
                    for (&d, &v) in dy.iter().zip(xh) {
                        s_dy += d.to_f64_lossy();
                        s_dy_xh += (d * v).to_f64_lossy();
                    }
                    dgamma[ch] = dgamma[ch] + T::lit(s_dy_xh);
                    dbeta[ch] = dbeta[ch] + T::lit(s_dy);
                    let g = gv[ch].to_f64_lossy();
                    let istd = inv_std[plane].to_f64_lossy();
                    let mf = m as f64;
                    // d xhat = g·dy, so both sums scale by g.
                    let (sum1, sum2) = (g * s_dy, g * s_dy_xh);
                    let out = &mut dx[plane * m..(plane + 1) * m];
                    for k in 0..m {
                        let dxh = g * dy[k].to_f64_lossy();
                        let v = istd / mf * (mf * dxh - sum1 - xh[k].to_f64_lossy() * sum2);
                        out[k] = T::lit(v);
                    }
                }
                if sink.wants(*x) {
                    sink.add_vec(*x, dx)?;
                }
                if sink.wants(*gamma) {
                    sink.add_vec(*gamma, dgamma)?;
                }
                if sink.wants(*beta) {
                    sink.add_vec(*beta, dbeta)?;
                }
            }
            Op::Dropout { x, mask } => {
                let d = gy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                sink.add_vec(*x, d)?;
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x);
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let mut dot = T::zero();
                        for k in 0..len {
                            dot = dot + gy[at(k)] * y[at(k)];
                        }
                        for k in 0..len {
                            d[at(k)] = y[at(k)] * (gy[at(k)] - dot);
                        }
                    }
                }
                sink.add_vec(*x, d)?;
            }
            Op::Add { a, b } => {
                sink.add_vec(*a, gy.to_vec())?;
                sink.add_vec(*b, gy.to_vec())?;
            }
            Op::Sub { a, b } => {
                sink.add_vec(*a, gy.to_vec())?;
                sink.add_vec(*b, gy.iter().map(|&g| -g).collect())?;
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                sink.add_vec(*a, gy.iter().zip(bv).map(|(&g, &v)| g * v).collect())?;
                sink.add_vec(*b, gy.iter().zip(av).map(|(&g, &v)| g * v).collect())?;
            }
            Op::Scale { x, factor } => {
                sink.add_vec(*x, gy.iter().map(|&g| g * *factor).collect())?;
            }
            Op::AddScalar { x } => {
                sink.add_vec(*x, gy.to_vec())?;
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                sink.add_vec(*x, vec![gy[0]; n])?;
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                sink.add_vec(*x, vec![gy[0] / T::lit(n as f64); n])?;
            }
            Op::L1Distance { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = gy[0] / T::lit(av.len() as f64);
                let sign: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if sink.wants(*b) {
                    sink.add_vec(*b, sign.iter().map(|&s| -s).collect())?;
                }
                sink.add_vec(*a, sign)?;
            }
            Op::Concat { parts } => {
                let s = gout.shape();
                let (n, plane) = (s[0], s[2] * s[3]);
                let total_c = s[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if sink.wants(p) {
                        let mut d = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let start = (b * total_c + offset) * plane;
                            d.extend_from_slice(&gy[start..start + pc * plane]);
                        }
                        sink.add_vec(p, d)?;
                    }
                    offset += pc;
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let m = s[2] * s[3];
                let inv = T::lit(1.0 / m as f64);
                let mut d = Vec::with_capacity(s.iter().product());
                for &g in gy {
                    d.extend(std::iter::repeat_n(g * inv, m));
                }
                sink.add_vec(*x, d)?;
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if sink.wants(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    kernels::gemm_acc(n, o, f, gy, self.value(*w).data(), &mut dx);
                    sink.add_vec(*x, dx)?;
                }
                if sink.wants(*w) {
                    let gy_t = kernels::transpose(n, o, gy);
                    let mut dw = vec![T::zero(); o * f];
                    kernels::gemm_acc(o, n, f, &gy_t, self.value(*x).data(), &mut dw);
                    sink.add_vec(*w, dw)?;
                }
                if sink.wants(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in gy.chunks(o) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    sink.add_vec(*b, db)?;
                }
            }
            Op::Column { x, col } => {
                let k = self.shape(*x)[1];
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (r, &g) in gy.iter().enumerate() {
                    d[r * k + col] = g;
                }
                sink.add_vec(*x, d)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                counted,
            } => {
                let s = self.shape(*logits);
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut d = vec![T::zero(); probs.len()];
                if *counted > 0 {
                    let scale = gy[0] / T::lit(*counted as f64);
                    for b in 0..n {
                        for p in 0..plane {
                            let Some(t) = targets[b * plane + p] else {
                                continue;
                            };
                            for k in 0..c {
                                let idx = (b * c + k) * plane + p;
                                let onehot = if k == t { T::one() } else { T::zero() };
                                d[idx] = (probs[idx] - onehot) * scale;
                            }
                        }
                    }
                }
                sink.add_vec(*logits, d)?;
            }
        }
        Ok(())
    }
}

fn channel_sums<T: Element>(gy: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (b * c + ch) * plane;
            *o = *o + gy[start..start + plane].iter().copied().sum::<T>();
        }
    }
    out
}

struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    op: &'static str,
}

impl<T: Element> GradSink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add_vec(&mut self, v: Var, d: Vec<T>) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGrad { op: self.op });
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(d) {
                    *e = *e + x;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, d)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Backward(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..9).map(|v| v as f32 * 0.5 - 1.0).collect();
        let x = g.constant(Tensor::new([1, 1, 3, 3], data.clone()).unwrap());
        let w = g.constant(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::new([1], vec![0.0]).unwrap());
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_shape_formulas() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([2, 3, 16, 16]));
        let w = g.constant(Tensor::zeros([8, 3, 4, 4]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 8, 8, 8]);

        let x = g.constant(Tensor::zeros([1, 4, 8, 8]));
        let w = g.constant(Tensor::zeros([4, 2, 4, 4]));
        let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 16, 16]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros([2, 2, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Shape(_))));
        let w = g.constant(Tensor::zeros([2, 3, 7, 7]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
        let wt = g.constant(Tensor::zeros([2, 3, 4, 4]));
        assert!(matches!(
            g.conv_transpose2d(x, wt, None, 2, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn one_by_one_transpose_scales() {
        let mut g = Graph::<f64>::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = g.constant(Tensor::new([1, 1, 2, 2], data.clone()).unwrap());
        let w = g.constant(Tensor::new([1, 1, 1, 1], vec![2.5]).unwrap());
        let y = g.conv_transpose2d(x, w, None, 1, 0).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| v * 2.5).collect();
        assert_eq!(g.value(y).data(), &expect[..]);
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([2], vec![2.0, -1.0]).unwrap());
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data()[0], 2.0);
        assert!((g.value(y).data()[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2, 3]));
        assert!(matches!(g.softmax(x, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn instance_norm_of_two_point_plane() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let gm = g.constant(Tensor::ones([1]));
        let bt = g.constant(Tensor::zeros([1]));
        let y = g.instance_norm(x, gm, bt, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_plane_normalizes_to_zero_with_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1, 2, 3, 3], 0.7));
        let gm = g.constant(Tensor::ones([2]));
        let bt = g.constant(Tensor::zeros([2]));
        let y = g.instance_norm(x, gm, bt, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
        let w = g.constant(Tensor::from_fn([1, 2, 3, 3], |i| (i as f64).sin()));
        let prod = g.mul(y, w).unwrap();
        let s = g.sum(prod).unwrap();
        g.backward(s).unwrap();
        // A uniform shift of a plane leaves the output unchanged, so the
        // gradient has no component along the all-ones direction.
        for plane in g.grad(x).unwrap().data().chunks(9) {
            assert!(plane.iter().sum::<f64>().abs() < 1e-9);
        }

        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1, 2, 3, 3], 0.7));
        let gm = g.constant(Tensor::full([2], 1.5));
        let bt = g.constant(Tensor::zeros([2]));
        let y = g.instance_norm(x, gm, bt, 1e-5).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn dropout_validation_and_identity_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones([10]));
        assert!(matches!(g.dropout(x, 1.0, true, &mut rng), Err(Error::Param(_))));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn log_of_zero_is_reported() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([3]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn cross_entropy_reports_offending_pixel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3, 2, 2]));
        let err = g.cross_entropy(x, &[0, 1, 2, 5], None).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelOutOfRange {
                label: 5,
                y: 1,
                x: 1,
                ..
            }
        ));
    }
}
