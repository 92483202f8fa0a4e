//! Append-only tape of tensor operations with reverse-mode differentiation.

use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `b`'s shape is a trailing suffix of `a`'s; `b` is broadcast over the leading axes.
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: T },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    BatchMatMul { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId>, rows: usize, k: usize, n: usize },
    Reshape { a: NodeId },
    Permute { a: NodeId, axes: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    Mean { a: NodeId, axis: usize },
    Sum { a: NodeId },
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, width: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: NodeId },
    Relu { a: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    /// `geom` is expressed in direct-convolution terms: its "in" side is this op's output.
    ConvTranspose2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    AvgPool2d { a: NodeId, k: usize },
    MaxPool2d { a: NodeId, argmax: Vec<usize> },
    Upsample { a: NodeId, factor: usize },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-owner computation tape. Nodes are appended in execution order,
/// so the node list is always a valid topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` for nodes that do not require grad or are off the loss ancestry.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Every op output is scanned for NaN/Inf and reported as an error.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", format!("{sb:?} does not broadcast onto {sa:?}")));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<T> = va.iter().zip(vb.iter().cycle()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(sa.to_vec(), data)?;
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        let value = self.value(a).map(|v| v * factor);
        self.push("scale", value, Op::Scale { a, factor }, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(kernels::gelu);
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|v| v.max(T::zero()));
        self.push("relu", value, Op::Relu { a }, &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::from_vec([m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `[..., m, k] × [..., k, n] → [..., m, n]` with identical leading axes.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(shape_err("batch_matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::matmul_acc(&va[i * m * k..][..m * k], &vb[i * k * n..][..k * n], &mut out[i * m * n..][..m * n], m, k, n);
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::from_vec(shape, out)?;
        self.push("batch_matmul", value, Op::BatchMatMul { a, b, batch, m, k, n }, &[a, b])
    }

    /// Affine map over the last axis: `x[..., k] · w[k, n] + b[n]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(shape_err("linear", format!("input {sx:?} does not match weight {sw:?}")));
        }
        let (k, n) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(shape_err("linear", format!("bias {:?} for output width {n}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / k;
        let mut out = match b {
            Some(b) => self.value(b).data().iter().copied().cycle().take(rows * n).collect(),
            None => vec![T::zero(); rows * n],
        };
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, k, n);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_vec(shape, out)?;
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("linear", value, Op::Linear { x, w, b, rows, k, n }, &inputs)
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("{axes:?} is not a permutation of the axes of {shape:?}")));
        }
        let data = kernels::permute(self.value(a).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
        let value = Tensor::from_vec(out_shape, data)?;
        self.push("permute", value, Op::Permute { a, axes: axes.to_vec() }, &[a])
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} does not align with {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let ext = self.shape(i)[axis];
                data.extend_from_slice(&self.value(i).data()[o * ext * inner..][..ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_vec(shape, data)?;
        self.push("concat", value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// `len` entries of `a` along `axis`, starting at `start`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err("slice", format!("[{start}, {start}+{len}) on axis {axis} of {shape:?}")));
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * ext + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_vec(out_shape, data)?;
        self.push("slice", value, Op::Slice { a, axis, start }, &[a])
    }

    // ---- reductions --------------------------------------------------------

    /// Arithmetic mean along `axis`; the axis is removed.
    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("mean", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(a).data();
        let inv = T::one() / T::from_f64(ext as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..][..inner];
                for (d, &v) in data[o * inner..][..inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::from_vec(out_shape, data)?;
        self.push("mean", value, Op::Mean { a, axis }, &[a])
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::from_vec(Vec::new(), vec![self.value(a).sum()])?;
        self.push("sum", value, Op::Sum { a }, &[a])
    }

    /// Numerically stabilised softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("softmax", "rank-0 input"))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let value = Tensor::from_vec(shape, data)?;
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    // ---- normalisation -----------------------------------------------------

    /// `(x − mean) / sqrt(var + eps) · gamma + beta` over the last axis, population variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for feature width {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (xhat, rstd) = normalize_rows(self.value(x).data(), d, eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat.iter().enumerate().map(|(i, &v)| v * g[i % d] + b[i % d]).collect();
        let value = Tensor::from_vec(shape, data)?;
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Group normalisation of a `[B,C,H,W]` map: statistics over each group of
    /// `C/groups` channels and all their positions, per sample, followed by a
    /// per-channel affine transform. `groups == C` is instance normalisation.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(shape_err("group_norm", format!("expected [B,C,H,W], got {shape:?}")));
        }
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        if groups == 0 || c % groups != 0 {
            return Err(shape_err("group_norm", format!("{groups} groups do not divide {c} channels")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", format!("affine params for {c} channels")));
        }
        let width = plane * (c / groups);
        let (xhat, rstd) = normalize_rows(self.value(x).data(), width, eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        let value = Tensor::from_vec(shape, data)?;
        self.push("group_norm", value, Op::GroupNorm { x, gamma, beta, width, xhat, rstd }, &[x, gamma, beta])
    }

    // ---- spatial -----------------------------------------------------------

    /// Cross-correlation of `x: [B,C,H,W]` with `w: [O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("expected 4-d input and weight, got {sx:?} and {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {sx:?} has {} channels, weight {sw:?} expects {}", sx[1], sw[1])));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument { op: "conv2d", detail: "stride must be positive".into() });
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh > sx[2] + 2 * pad || kw > sx[3] + 2 * pad {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {sx:?} (pad {pad})")));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_c: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_c: sw[0],
            out_h: (sx[2] + 2 * pad - kh) / stride + 1,
            out_w: (sx[3] + 2 * pad - kw) / stride + 1,
            kh,
            kw,
            stride,
            pad,
        };
        self.check_bias("conv2d", b, geom.out_c)?;
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let value = Tensor::from_vec([geom.batch, geom.out_c, geom.out_h, geom.out_w], out)?;
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Transposed convolution of `x: [B,C,H,W]` with `w: [C,O,kh,kw]`; output
    /// extent `(H−1)·stride − 2·pad + kh + output_pad`. It is the adjoint of
    /// [`Graph::conv2d`] with the same weight, stride and padding.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::InvalidArgument { op: "transposed_conv2d", detail: "stride must be positive".into() });
        }
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(shape_err("transposed_conv2d", format!("input {sx:?} does not match weight {sw:?}")));
        }
        if output_pad >= stride {
            return Err(Error::InvalidArgument { op: "transposed_conv2d", detail: "output padding must be below the stride".into() });
        }
        let (kh, kw) = (sw[2], sw[3]);
        let full_h = (sx[2] - 1) * stride + kh + output_pad;
        let full_w = (sx[3] - 1) * stride + kw + output_pad;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(shape_err("transposed_conv2d", format!("padding {pad} consumes the whole output")));
        }
        // Direct-convolution view: the transposed output is the conv "input".
        let geom = ConvGeom {
            batch: sx[0],
            in_c: sw[1],
            in_h: full_h - 2 * pad,
            in_w: full_w - 2 * pad,
            out_c: sx[1],
            out_h: sx[2],
            out_w: sx[3],
            kh,
            kw,
            stride,
            pad,
        };
        self.check_bias("transposed_conv2d", b, geom.in_c)?;
        let mut out = vec![T::zero(); geom.in_len()];
        kernels::conv2d_input_grad(self.value(x).data(), self.value(w).data(), &mut out, &geom);
        if let Some(b) = b {
            let bias = self.value(b).data();
            let plane = geom.in_h * geom.in_w;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bias[i % geom.in_c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::from_vec([geom.batch, geom.in_c, geom.in_h, geom.in_w], out)?;
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("transposed_conv2d", value, Op::ConvTranspose2d { x, w, b, geom }, &inputs)
    }

    fn check_bias(&self, op: &'static str, b: Option<NodeId>, channels: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [channels] => {
                Err(shape_err(op, format!("bias {:?} for {channels} output channels", self.shape(b))))
            }
            _ => Ok(()),
        }
    }

    /// Non-overlapping `k×k` average pooling on `[B,C,H,W]`; `k` must divide H and W.
    pub fn avg_pool2d(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(shape_err("avg_pool2d", format!("{k}x{k} pooling does not tile {s:?}")));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let src = self.value(a).data();
        let inv = T::one() / T::from_f64((k * k) as f64);
        let mut out = vec![T::zero(); s[0] * s[1] * oh * ow];
        for (p, plane) in src.chunks(s[2] * s[3]).enumerate() {
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for y in 0..s[2] {
                for x in 0..s[3] {
                    dst[(y / k) * ow + x / k] += plane[y * s[3] + x];
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::from_vec([s[0], s[1], oh, ow], out)?;
        self.push("avg_pool2d", value, Op::AvgPool2d { a, k }, &[a])
    }

    /// `k×k` max pooling with stride and implicit `-inf` padding. Ties go to
    /// the first position in row-major window order.
    pub fn max_pool2d(&mut self, a: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || stride == 0 || k > s[2] + 2 * pad || k > s[3] + 2 * pad || pad >= k {
            return Err(shape_err("max_pool2d", format!("invalid window {k} stride {stride} pad {pad} on {s:?}")));
        }
        let (h, w) = (s[2] as isize, s[3] as isize);
        let oh = (s[2] + 2 * pad - k) / stride + 1;
        let ow = (s[3] + 2 * pad - k) / stride + 1;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for (p, plane) in src.chunks((h * w) as usize).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_at = 0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let at = (iy * w + ix) as usize;
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(p * (h * w) as usize + best_at);
                }
            }
        }
        let value = Tensor::from_vec([s[0], s[1], oh, ow], out)?;
        self.push("max_pool2d", value, Op::MaxPool2d { a, argmax }, &[a])
    }

    /// Nearest-neighbour upsampling of `[B,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(shape_err("upsample_nearest", format!("factor {factor} on {s:?}")));
        }
        let (oh, ow) = (s[2] * factor, s[3] * factor);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        for plane in src.chunks(s[2] * s[3]) {
            for y in 0..oh {
                let row = &plane[(y / factor) * s[3]..][..s[3]];
                for x in 0..ow {
                    out.push(row[x / factor]);
                }
            }
        }
        let value = Tensor::from_vec([s[0], s[1], oh, ow], out)?;
        self.push("upsample_nearest", value, Op::Upsample { a, factor }, &[a])
    }

    // ---- loss --------------------------------------------------------------

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument { op: "cross_entropy", detail: format!("label {bad} out of range for {k} classes") });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / T::from_f64(labels.len() as f64);
        let value = Tensor::from_vec(Vec::new(), vec![loss])?;
        self.push("cross_entropy", value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node on the loss ancestry that
    /// requires grad. Fan-out contributions accumulate additively.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(shape_err("backward", format!("loss must be a scalar, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Some(Tensor::from_vec(n.value.shape().to_vec(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    let n = d.len();
                    for chunk in g.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| d.iter_mut().zip(g).zip(vb).for_each(|((d, &g), &y)| *d += g * y));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).zip(va).for_each(|((d, &g), &x)| *d += g * x));
            }
            Op::Scale { a, factor } => self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *factor)),
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |d| d.iter_mut().zip(g).zip(x).for_each(|((d, &g), &x)| *d += g * kernels::gelu_grad(x)));
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(x).filter(|(_, &x)| x > T::zero()).for_each(|((d, &g), _)| *d += g)
                });
            }
            &Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |d| kernels::matmul_grad_a(g, vb, d, m, k, n));
                self.acc(grads, b, |d| kernels::matmul_grad_b(va, g, d, m, k, n));
            }
            &Op::BatchMatMul { a, b, batch, m, k, n } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.acc(grads, a, |d| {
                    for i in 0..batch {
                        kernels::matmul_grad_a(&g[i * m * n..][..m * n], &vb[i * k * n..][..k * n], &mut d[i * m * k..][..m * k], m, k, n);
                    }
                });
                self.acc(grads, b, |d| {
                    for i in 0..batch {
                        kernels::matmul_grad_b(&va[i * m * k..][..m * k], &g[i * m * n..][..m * n], &mut d[i * k * n..][..k * n], m, k, n);
                    }
                });
            }
            &Op::Linear { x, w, b, rows, k, n } => {
                let (vx, vw) = (self.value(x).data(), self.value(w).data());
                self.acc(grads, x, |d| kernels::matmul_grad_a(g, vw, d, rows, k, n));
                self.acc(grads, w, |d| kernels::matmul_grad_b(vx, g, d, rows, k, n));
                if let Some(b) = b {
                    self.acc(grads, b, |d| {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Reshape { a } => self.acc(grads, *a, |d| add_into(d, g)),
            Op::Permute { a, axes } => {
                let back = kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
                self.acc(grads, *a, |d| add_into(d, &back));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &i in inputs {
                    let ext = self.shape(i)[*axis];
                    self.acc(grads, i, |d| {
                        for o in 0..outer {
                            add_into(&mut d[o * ext * inner..][..ext * inner], &g[(o * total + offset) * inner..][..ext * inner]);
                        }
                    });
                    offset += ext;
                }
            }
            &Op::Slice { a, axis, start } => {
                let (outer, ext, inner) = kernels::split_axis(self.shape(a), axis);
                let len = node.value.shape()[axis];
                self.acc(grads, a, |d| {
                    for o in 0..outer {
                        add_into(&mut d[(o * ext + start) * inner..][..len * inner], &g[o * len * inner..][..len * inner]);
                    }
                });
            }
            &Op::Mean { a, axis } => {
                let (outer, ext, inner) = kernels::split_axis(self.shape(a), axis);
                let inv = T::one() / T::from_f64(ext as f64);
                self.acc(grads, a, |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..][..inner];
                        for e in 0..ext {
                            for (d, &v) in d[(o * ext + e) * inner..][..inner].iter_mut().zip(src) {
                                *d += v * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum { a } => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Softmax { a } => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                self.acc(grads, *a, |d| {
                    for ((d, y), g) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = y.iter().zip(g).map(|(&y, &g)| y * g).sum();
                        for ((d, &y), &g) in d.iter_mut().zip(y).zip(g) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d_feat = *node.value.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                self.acc(grads, *gamma, |d| {
                    for (i, (&gv, &xh)) in g.iter().zip(xhat.iter()).enumerate() {
                        d[i % d_feat] += gv * xh;
                    }
                });
                self.acc(grads, *beta, |d| {
                    for row in g.chunks(d_feat) {
                        add_into(d, row);
                    }
                });
                self.acc(grads, *x, |d| {
                    norm_input_grad(d, g, xhat, rstd, d_feat, |i| gam[i % d_feat]);
                });
            }
            Op::GroupNorm { x, gamma, beta, width, xhat, rstd } => {
                let s = node.value.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                self.acc(grads, *gamma, |d| {
                    for (p, (gr, xh)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        d[p % c] += gr.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
                self.acc(grads, *beta, |d| {
                    for (p, gr) in g.chunks(plane).enumerate() {
                        d[p % c] += gr.iter().copied().sum::<T>();
                    }
                });
                self.acc(grads, *x, |d| {
                    norm_input_grad(d, g, xhat, rstd, *width, |i| gam[(i / plane) % c]);
                });
            }
            &Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (self.value(x).data(), self.value(w).data());
                self.acc(grads, x, |d| kernels::conv2d_input_grad(g, vw, d, &geom));
                self.acc(grads, w, |d| kernels::conv2d_weight_grad(vx, g, d, &geom));
                if let Some(b) = b {
                    self.acc(grads, b, |d| kernels::channel_sum_acc(g, d, geom.batch, geom.out_c, geom.out_h * geom.out_w));
                }
            }
            &Op::ConvTranspose2d { x, w, b, geom } => {
                let (vx, vw) = (self.value(x).data(), self.value(w).data());
                // d(x) is the direct convolution of the output gradient.
                self.acc(grads, x, |d| add_into(d, &kernels::conv2d_forward(g, vw, None, &geom)));
                self.acc(grads, w, |d| kernels::conv2d_weight_grad(g, vx, d, &geom));
                if let Some(b) = b {
                    self.acc(grads, b, |d| kernels::channel_sum_acc(g, d, geom.batch, geom.in_c, geom.in_h * geom.in_w));
                }
            }
            &Op::AvgPool2d { a, k } => {
                let s = self.shape(a);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::from_f64((k * k) as f64);
                self.acc(grads, a, |d| {
                    for (dp, gp) in d.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for y in 0..h {
                            for x in 0..w {
                                dp[y * w + x] += gp[(y / k) * ow + x / k] * inv;
                            }
                        }
                    }
                });
            }
            Op::MaxPool2d { a, argmax } => {
                self.acc(grads, *a, |d| {
                    for (&at, &gv) in argmax.iter().zip(g) {
                        d[at] += gv;
                    }
                });
            }
            &Op::Upsample { a, factor } => {
                let s = self.shape(a);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                self.acc(grads, a, |d| {
                    for (dp, gp) in d.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for y in 0..oh {
                            for x in 0..ow {
                                dp[(y / factor) * w + x / factor] += gp[y * ow + x];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                self.acc(grads, *logits, |d| {
                    for (r, (drow, prow)) in d.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (j, (dv, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == labels[r] { T::one() } else { T::zero() };
                            *dv += (p - target) * scale;
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], target: NodeId, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[target.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        f(buf);
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise standardisation; returns `(xhat, 1/sqrt(var+eps))`.
fn normalize_rows<T: Element>(x: &[T], width: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64(eps);
    let inv_n = T::one() / T::from_f64(width as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / width);
    for row in x.chunks(width) {
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
    }
    (xhat, rstd)
}

/// `dx = rstd · (dxh − mean(dxh) − xhat · mean(dxh · xhat))` per row, `dxh = g · gamma`.
fn norm_input_grad<T: Element>(d: &mut [T], g: &[T], xhat: &[T], rstd: &[T], width: usize, gamma: impl Fn(usize) -> T) {
    let inv_n = T::one() / T::from_f64(width as f64);
    for (row, &r) in rstd.iter().enumerate() {
        let base = row * width;
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for i in base..base + width {
            let dxh = g[i] * gamma(i);
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat[i];
        }
        mean_dxh *= inv_n;
        mean_dxh_xh *= inv_n;
        for i in base..base + width {
            let dxh = g[i] * gamma(i);
            d[i] += r * (dxh - mean_dxh - xhat[i] * mean_dxh_xh);
        }
    }
}
