//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients for the nodes that
//! depend on a leaf created with `requires_grad`.

use crate::error::{Error, Result};
use crate::kernels::{self, Geometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: Geometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: Geometry,
        ci: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
        plane: usize,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulMask {
        x: Var,
        mask: Tensor<T>,
    },
    Scale(Var, T),
    Abs(Var),
    Square(Var),
    Log(Var),
    Softplus(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        channels: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    fn dims4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(Error::shape(format!("{what}: expected 4-d input, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Zero-padded convolution; `w` is `(co, ci, k, k)`, `b` is `(co)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [batch, ci, h, wd] = self.dims4(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != ci || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv2d: weight {ws:?} incompatible with {ci} input channels"
            )));
        }
        let (co, k) = (ws[0], ws[2]);
        let oh = Geometry::conv_out(h, k, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d: kernel {k} does not fit height {h}")))?;
        let ow = Geometry::conv_out(wd, k, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d: kernel {k} does not fit width {wd}")))?;
        let g = Geometry {
            c: ci,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let out = kernels::conv2d_forward(
            &g,
            batch,
            co,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[batch, co, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, g }, &parents))
    }

    /// Fractionally-strided convolution; `w` is `(ci, co, k, k)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let [batch, ci, h, wd] = self.dims4(x, "conv_transpose2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != ci || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv_transpose2d: weight {ws:?} incompatible with {ci} input channels"
            )));
        }
        let (co, k) = (ws[1], ws[2]);
        let oh = Geometry::conv_transpose_out(h, k, stride, pad, out_pad)
            .ok_or_else(|| Error::shape("conv_transpose2d: empty output"))?;
        let ow = Geometry::conv_transpose_out(wd, k, stride, pad, out_pad)
            .ok_or_else(|| Error::shape("conv_transpose2d: empty output"))?;
        let g = Geometry {
            c: co,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        let out = kernels::conv_transpose2d_forward(
            &g,
            batch,
            ci,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_vec(&[batch, co, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, g, ci }, &parents))
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let [_, _, h, w] = self.dims4(x, "instance_norm")?;
        let plane = h * w;
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x).data(), plane, eps);
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(value, Op::InstanceNorm { x, inv_std, plane }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(value, Op::LeakyRelu(x, s), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies `x (b, c, h, w)` by a constant single-channel mask
    /// `(b, 1, h, w)` broadcast over channels.
    pub fn mul_mask(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        let [b, c, h, w] = self.dims4(x, "mul_mask")?;
        same_shape(mask.shape(), &[b, 1, h, w], "mul_mask")?;
        let plane = h * w;
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let m = &mask.data()[(i / c) * plane..(i / c + 1) * plane];
            for (o, &mv) in chunk.iter_mut().zip(m) {
                *o *= mv;
            }
        }
        Ok(self.push(out, Op::MulMask { x, mask }, &[x]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.push(value, Op::Log(x), &[x])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        self.push(value, Op::Softplus(x), &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping occurred.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x), &[x])
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::shape("weighted_sum of zero terms"))
    }

    /// Concatenation of 4-d tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.dims4(*parts.first().ok_or_else(|| Error::shape("empty concat"))?, "concat")?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.dims4(p, "concat")?;
            if d[0] != first[0] || d[2] != first[2] || d[3] != first[3] {
                return Err(Error::shape(format!("concat: {d:?} vs {first:?}")));
            }
            channels.push(d[1]);
        }
        let total: usize = channels.iter().sum();
        let plane = first[2] * first[3];
        let mut data = Vec::with_capacity(first[0] * total * plane);
        for b in 0..first[0] {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec(&[first[0], total, first[2], first[3]], data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                channels,
            },
            parts,
        ))
    }

    /// `(b, c, h, w) -> (b, c)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims4(x, "global_avg_pool")?;
        let plane = h * w;
        let n = T::lit(plane as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::from_vec(&[b, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x (b, d) · wᵀ + b` with `w (o, d)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (batch, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * o];
        T::gemm(
            batch,
            d,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let value = Tensor::from_vec(&[batch, o], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(format!("cross_entropy: label {bad} with {k} classes")));
        }
        let mut probs = Vec::with_capacity(s[0] * k);
        let mut total = T::zero();
        for (row, &label) in self.value(logits).data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / T::lit(labels.len() as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// depends on a `requires_grad` leaf.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Grads { grads };
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, g } => {
                let batch = self.shape(*x)[0];
                let co = self.shape(*w)[0];
                let r = kernels::conv2d_backward(
                    g,
                    batch,
                    co,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                self.scatter_conv(grads, *x, *w, *b, r);
            }
            Op::ConvTranspose2d { x, w, b, g, ci } => {
                let batch = self.shape(*x)[0];
                let r = kernels::conv_transpose2d_backward(
                    g,
                    batch,
                    *ci,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy.data(),
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                self.scatter_conv(grads, *x, *w, *b, r);
            }
            Op::InstanceNorm { x, inv_std, plane } => {
                let dx = kernels::instance_norm_backward(y.data(), inv_std, dy.data(), *plane);
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), dx).expect("shape"));
            }
            Op::Relu(x) => {
                let g = y.zip_map(dy, |v, d| if v > T::zero() { d } else { T::zero() });
                self.accumulate(grads, *x, g);
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let g = self.value(*x).zip_map(dy, |v, d| if v > T::zero() { d } else { d * s });
                self.accumulate(grads, *x, g);
            }
            Op::Tanh(x) => {
                let g = y.zip_map(dy, |v, d| d * (T::one() - v * v));
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = y.zip_map(dy, |v, d| d * v * (T::one() - v));
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|d| -d));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let g = self.value(*b).zip_map(dy, |v, d| v * d);
                    self.accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let g = self.value(*a).zip_map(dy, |v, d| v * d);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::MulMask { x, mask } => {
                let s = y.shape();
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut g = dy.clone();
                for (i, chunk) in g.data_mut().chunks_mut(plane).enumerate() {
                    let m = &mask.data()[(i / c) * plane..(i / c + 1) * plane];
                    for (o, &mv) in chunk.iter_mut().zip(m) {
                        *o *= mv;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, dy.map(|d| d * s));
            }
            Op::Abs(x) => {
                // subgradient 0 at the kink
                let g = self.value(*x).zip_map(dy, |v, d| {
                    if v > T::zero() {
                        d
                    } else if v < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, g);
            }
            Op::Square(x) => {
                let g = self.value(*x).zip_map(dy, |v, d| d * (v + v));
                self.accumulate(grads, *x, g);
            }
            Op::Log(x) => {
                let g = self.value(*x).zip_map(dy, |v, d| d / v);
                self.accumulate(grads, *x, g);
            }
            Op::Softplus(x) => {
                let g = self.value(*x).zip_map(dy, |v, d| d * sigmoid(v));
                self.accumulate(grads, *x, g);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let g = self
                    .value(*x)
                    .zip_map(dy, |v, d| if v < lo || v > hi { T::zero() } else { d });
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let d = dy.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), d));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len() as f64);
                let d = dy.item() / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), d));
            }
            Op::Concat { parts, channels } => {
                let s = y.shape();
                let (batch, total, plane) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(channels) {
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(batch * c * plane);
                        for b in 0..batch {
                            let start = (b * total + offset) * plane;
                            data.extend_from_slice(&dy.data()[start..start + c * plane]);
                        }
                        let g = Tensor::from_vec(self.shape(p), data).expect("shape");
                        self.accumulate(grads, p, g);
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let n = T::lit(plane as f64);
                let mut data = Vec::with_capacity(self.value(*x).len());
                for &d in dy.data() {
                    data.extend(std::iter::repeat_n(d / n, plane));
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, data).expect("shape"));
            }
            Op::Linear { x, w, b } => {
                let (batch, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); batch * d];
                    T::gemm(
                        batch,
                        o,
                        d,
                        dy.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        false,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&[batch, d], dx).expect("shape"));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * d];
                    T::gemm(
                        o,
                        batch,
                        d,
                        dy.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(&[o, d], dw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); o];
                        for row in dy.data().chunks(o) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[o], db).expect("shape"));
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = dy.item() / T::lit(labels.len() as f64);
                let mut g = probs.clone();
                for (row, &label) in g.chunks_mut(k).zip(labels) {
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                let g = Tensor::from_vec(self.shape(*logits), g).expect("shape");
                self.accumulate(grads, *logits, g);
            }
        }
    }

    fn scatter_conv(&self, grads: &mut [Option<Tensor<T>>], x: Var, w: Var, b: Option<Var>, r: kernels::ConvGrads<T>) {
        if let Some(dx) = r.dx {
            self.accumulate(grads, x, Tensor::from_vec(self.shape(x), dx).expect("shape"));
        }
        if let Some(dw) = r.dw {
            self.accumulate(grads, w, Tensor::from_vec(self.shape(w), dw).expect("shape"));
        }
        if let (Some(b), Some(db)) = (b, r.db) {
            self.accumulate(grads, b, Tensor::from_vec(self.shape(b), db).expect("shape"));
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(v: T) -> T {
    // max(v, 0) + ln(1 + e^{-|v|})
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
