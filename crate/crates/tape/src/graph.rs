//! Reverse-mode automatic differentiation over a per-step graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are
//! borrowed rather than copied, so a graph lives no longer than the models
//! that feed it. Nodes that do not depend on a trainable parameter or a
//! differentiable input carry no gradient and are skipped by
//! [`Graph::backward`].

use std::borrow::Cow;
use std::collections::HashMap;

use crate::scalar::{gemm, MatView};
use crate::{Param, ParamKey, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a broadcast: the operand is viewed as `[outer, c, inner]` and
/// the broadcast vector has length `c`.
#[derive(Debug, Clone, Copy)]
struct Bcast {
    outer: usize,
    c: usize,
    inner: usize,
}

#[derive(Debug, Clone, Copy)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_shared: bool,
}

impl MatMulDims {
    fn a_view(&self, bi: usize) -> MatView {
        let off = bi * self.m * self.k;
        if self.ta {
            MatView::row_major(off, self.m).t()
        } else {
            MatView::row_major(off, self.k)
        }
    }

    fn b_view(&self, bi: usize) -> MatView {
        let off = if self.b_shared { 0 } else { bi * self.k * self.n };
        if self.tb {
            MatView::row_major(off, self.k).t()
        } else {
            MatView::row_major(off, self.n)
        }
    }

    fn c_view(&self, bi: usize) -> MatView {
        MatView::row_major(bi * self.m * self.n, self.n)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let (k, hw) = (self.k, self.ho * self.wo);
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0
                                && (iy as usize) < self.h
                                && ix >= 0
                                && (ix as usize) < self.w
                            {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                S::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let (k, hw) = (self.k, self.ho * self.wo);
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[(c * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Scale(Var, S),
    AddBcast(Var, Var, Bcast),
    MulBcast(Var, Var, Bcast),
    Relu(Var),
    Silu(Var),
    Gelu(Var),
    MatMul(Var, Var, MatMulDims),
    Conv2d(Var, Var, ConvDims),
    Upsample2x { x: Var, planes: usize, h: usize, w: usize },
    AvgPool { x: Var, planes: usize, h: usize, w: usize, g: usize },
    NormRows { x: Var, k: usize, inv_std: Vec<S> },
    Swap12 { x: Var, dims: [usize; 4] },
    Softmax { x: Var, k: usize },
    Concat { parts: Vec<Var>, outer: usize, cs: Vec<usize>, inner: usize },
    Reshape(Var),
    Mse { pred: Var, target: Tensor<S> },
    L1 { pred: Var, target: Tensor<S> },
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a forward pass and differentiates it.
pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    params: HashMap<ParamKey, Var>,
}

impl<'a, S: Scalar> Default for Graph<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adaptive average pooling window `[start, end)` for output cell `i` of `g`.
pub fn pool_window(i: usize, len: usize, g: usize) -> (usize, usize) {
    let start = i * len / g;
    let end = ((i + 1) * len).div_ceil(g);
    (start, end.max(start + 1))
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation, returns (value, derivative)
    let c = S::c((2.0 / std::f64::consts::PI).sqrt());
    let a = S::c(0.044715);
    let half = S::c(0.5);
    let one = S::one();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (one + S::c(3.0) * a * x * x);
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * du;
    (y, dy)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<S>>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<S>, op: Op<S>, deps: &[Var]) -> Var {
        let needs = deps.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<S>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Registers a parameter. Repeated calls with the same parameter return
    /// the same node, so gradients from every use accumulate in one slot.
    pub fn param(&mut self, p: &'a Param<S>) -> Var {
        if let Some(&v) = self.params.get(&p.key()) {
            return v;
        }
        let v = self.push(Cow::Borrowed(&p.value), Op::Leaf, p.is_trainable());
        self.params.insert(p.key(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        self.push_owned(t, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push_owned(t, Op::Scale(a, s), &[a])
    }

    fn bcast_layout(&self, x: Var, v: Var, outer: usize, inner: usize) -> Bcast {
        let c = self.value(v).numel();
        assert_eq!(outer * c * inner, self.value(x).numel(), "broadcast layout mismatch");
        Bcast { outer, c, inner }
    }

    /// `x[o, i, j] + v[i]` with `x` viewed as `[outer, len(v), inner]`.
    pub fn add_bcast(&mut self, x: Var, v: Var, outer: usize, inner: usize) -> Var {
        let l = self.bcast_layout(x, v, outer, inner);
        let (vx, vv) = (self.value(x), self.value(v));
        let mut out = vx.data().to_vec();
        for o in 0..l.outer {
            for i in 0..l.c {
                let b = vv.data()[i];
                let base = (o * l.c + i) * l.inner;
                for e in &mut out[base..base + l.inner] {
                    *e += b;
                }
            }
        }
        let t = Tensor::from_vec(vx.shape(), out);
        self.push_owned(t, Op::AddBcast(x, v, l), &[x, v])
    }

    /// `x[o, i, j] * v[i]` with `x` viewed as `[outer, len(v), inner]`.
    pub fn mul_bcast(&mut self, x: Var, v: Var, outer: usize, inner: usize) -> Var {
        let l = self.bcast_layout(x, v, outer, inner);
        let (vx, vv) = (self.value(x), self.value(v));
        let mut out = vx.data().to_vec();
        for o in 0..l.outer {
            for i in 0..l.c {
                let b = vv.data()[i];
                let base = (o * l.c + i) * l.inner;
                for e in &mut out[base..base + l.inner] {
                    *e *= b;
                }
            }
        }
        let t = Tensor::from_vec(vx.shape(), out);
        self.push_owned(t, Op::MulBcast(x, v, l), &[x, v])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(S::zero()));
        self.push_owned(t, Op::Relu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push_owned(t, Op::Silu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        self.push_owned(t, Op::Gelu(x), &[x])
    }

    /// Batched matrix product.
    ///
    /// `a` holds `batch` matrices `[m, k]` (`[k, m]` when `ta`), `b` holds
    /// `batch` or one matrix `[k, n]` (`[n, k]` when `tb`). The result has
    /// shape `[batch, m, n]`, or `[m, n]` when `batch == 1` and both inputs
    /// are 2-D.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs matrices");
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (m, k) = if ta { (c, r) } else { (r, c) };
        let b_batch: usize = sb[..sb.len() - 2].iter().product();
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "matmul: inner dimension mismatch {sa:?} x {sb:?}");
        assert!(b_batch == batch || b_batch == 1, "matmul: batch mismatch {sa:?} x {sb:?}");
        let dims = MatMulDims { batch, m, k, n, ta, tb, b_shared: b_batch == 1 && batch > 1 };
        let mut out = vec![S::zero(); batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            gemm(m, k, n, S::one(), va, dims.a_view(bi), vb, dims.b_view(bi), S::zero(), &mut out, dims.c_view(bi));
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::from_vec(&shape, out);
        self.push_owned(t, Op::MatMul(a, b, dims), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 4, "conv2d input must be NCHW");
        assert_eq!(sw.len(), 4, "conv2d weight must be OCkk");
        assert_eq!(sx[1], sw[1], "conv2d: channel mismatch {sx:?} vs {sw:?}");
        assert_eq!(sw[2], sw[3]);
        let k = sw[2];
        let ho = (sx[2] + 2 * pad - k) / stride + 1;
        let wo = (sx[3] + 2 * pad - k) / stride + 1;
        let d = ConvDims { n: sx[0], cin: sx[1], h: sx[2], w: sx[3], cout: sw[0], k, stride, pad, ho, wo };
        let ckk = d.cin * k * k;
        let hw = ho * wo;
        let mut out = vec![S::zero(); d.n * d.cout * hw];
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let mut cols = if d.is_pointwise() { Vec::new() } else { vec![S::zero(); ckk * hw] };
        let in_sz = d.cin * d.h * d.w;
        for ni in 0..d.n {
            let xs = &vx[ni * in_sz..(ni + 1) * in_sz];
            let src: &[S] = if d.is_pointwise() {
                xs
            } else {
                d.im2col(xs, &mut cols);
                &cols
            };
            gemm(
                d.cout,
                ckk,
                hw,
                S::one(),
                vw,
                MatView::row_major(0, ckk),
                src,
                MatView::row_major(0, hw),
                S::zero(),
                &mut out,
                MatView::row_major(ni * d.cout * hw, hw),
            );
        }
        let t = Tensor::from_vec(&[d.n, d.cout, ho, wo], out);
        self.push_owned(t, Op::Conv2d(x, w, d), &[x, w])
    }

    /// Nearest-neighbour upsampling by two of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let vx = self.value(x).data();
        let mut out = vec![S::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = vx[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out);
        self.push_owned(t, Op::Upsample2x { x, planes, h, w }, &[x])
    }

    /// Adaptive average pooling of `[N, C, H, W]` to `[N, C, g, g]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, g: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let vx = self.value(x).data();
        let mut out = vec![S::zero(); planes * g * g];
        for p in 0..planes {
            for i in 0..g {
                let (y0, y1) = pool_window(i, h, g);
                for j in 0..g {
                    let (x0, x1) = pool_window(j, w, g);
                    let mut acc = S::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += vx[(p * h + y) * w + xx];
                        }
                    }
                    out[(p * g + i) * g + j] = acc / S::c(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let t = Tensor::from_vec(&[s[0], s[1], g, g], out);
        self.push_owned(t, Op::AvgPool { x, planes, h, w, g }, &[x])
    }

    /// Standardizes every contiguous row of length `k` to zero mean and unit
    /// (biased) variance.
    pub fn normalize_rows(&mut self, x: Var, k: usize, eps: f64) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.numel() % k, 0, "normalize_rows: {} not divisible by {k}", vx.numel());
        let rows = vx.numel() / k;
        let mut out = vec![S::zero(); vx.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let kk = S::c(k as f64);
        for r in 0..rows {
            let row = &vx.data()[r * k..(r + 1) * k];
            let mean = row.iter().copied().sum::<S>() / kk;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / kk;
            let inv = S::one() / (var + S::c(eps)).sqrt();
            for (o, &v) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::from_vec(vx.shape(), out);
        self.push_owned(t, Op::NormRows { x, k, inv_std }, &[x])
    }

    /// Views `x` as `[a, b, c, d]` and swaps the middle axes to `[a, c, b, d]`.
    pub fn swap12(&mut self, x: Var, dims: [usize; 4]) -> Var {
        let vx = self.value(x);
        assert_eq!(dims.iter().product::<usize>(), vx.numel(), "swap12 layout mismatch");
        let [a, b, c, d] = dims;
        let mut out = vec![S::zero(); vx.numel()];
        let src = vx.data();
        for ai in 0..a {
            for bi in 0..b {
                for ci in 0..c {
                    let s = ((ai * b + bi) * c + ci) * d;
                    let t = ((ai * c + ci) * b + bi) * d;
                    out[t..t + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let t = Tensor::from_vec(&[a, c, b, d], out);
        self.push_owned(t, Op::Swap12 { x, dims }, &[x])
    }

    /// Softmax over contiguous rows of length `k`. With `causal`, the input is
    /// treated as stacked `[k, k]` score matrices and entries above the
    /// diagonal get zero probability.
    pub fn softmax(&mut self, x: Var, k: usize, causal: bool) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.numel() % k, 0);
        let rows = vx.numel() / k;
        let mut out = vec![S::zero(); vx.numel()];
        for r in 0..rows {
            let visible = if causal { r % k + 1 } else { k };
            let row = &vx.data()[r * k..r * k + visible];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let o = &mut out[r * k..r * k + visible];
            let mut z = S::zero();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - mx).exp();
                z += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= z;
            }
        }
        let t = Tensor::from_vec(vx.shape(), out);
        self.push_owned(t, Op::Softmax { x, k }, &[x])
    }

    /// Concatenates tensors viewed as `[outer, c_i, inner]` along the middle
    /// axis. The result keeps the shape of the first part except for the
    /// concatenation axis `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]).to_vec();
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut cs = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            assert_eq!(sp.len(), s0.len(), "concat rank mismatch");
            assert_eq!(&sp[..axis], &s0[..axis], "concat outer mismatch");
            assert_eq!(&sp[axis + 1..], &s0[axis + 1..], "concat inner mismatch");
            cs.push(sp[axis]);
        }
        let total: usize = cs.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&cs) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let t = Tensor::from_vec(&shape, out);
        self.push_owned(t, Op::Concat { parts: parts.to_vec(), outer, cs, inner }, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        self.push_owned(t, Op::Reshape(x), &[x])
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, pred: Var, target: &Tensor<S>) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "mse: shape mismatch");
        let n = S::c(vp.numel() as f64);
        let l = vp.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<S>() / n;
        self.push_owned(Tensor::scalar(l), Op::Mse { pred, target: target.clone() }, &[pred])
    }

    /// Mean of absolute differences over all entries.
    pub fn l1(&mut self, pred: Var, target: &Tensor<S>) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "l1: shape mismatch");
        let n = S::c(vp.numel() as f64);
        let l = vp.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum::<S>() / n;
        self.push_owned(Tensor::scalar(l), Op::L1 { pred, target: target.clone() }, &[pred])
    }

    /// Differentiates the scalar `loss` with respect to every node that
    /// needs a gradient.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads, params: self.params.clone() };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'a, S>, gy: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let acc = |grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, gy.clone());
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    acc(grads, *a, gy.map(|g| g * *s));
                }
            }
            Op::AddBcast(x, v, l) => {
                if self.wants(*x) {
                    acc(grads, *x, gy.clone());
                }
                if self.wants(*v) {
                    let mut gv = vec![S::zero(); l.c];
                    for o in 0..l.outer {
                        for (i, g) in gv.iter_mut().enumerate() {
                            let base = (o * l.c + i) * l.inner;
                            *g += gy.data()[base..base + l.inner].iter().copied().sum::<S>();
                        }
                    }
                    acc(grads, *v, Tensor::from_vec(self.shape(*v), gv));
                }
            }
            Op::MulBcast(x, v, l) => {
                let vv = self.value(*v).data();
                if self.wants(*x) {
                    let mut gx = gy.data().to_vec();
                    for o in 0..l.outer {
                        for i in 0..l.c {
                            let base = (o * l.c + i) * l.inner;
                            for e in &mut gx[base..base + l.inner] {
                                *e *= vv[i];
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(gy.shape(), gx));
                }
                if self.wants(*v) {
                    let vx = self.value(*x).data();
                    let mut gv = vec![S::zero(); l.c];
                    for o in 0..l.outer {
                        for (i, g) in gv.iter_mut().enumerate() {
                            let base = (o * l.c + i) * l.inner;
                            *g += (base..base + l.inner).map(|e| gy.data()[e] * vx[e]).sum::<S>();
                        }
                    }
                    acc(grads, *v, Tensor::from_vec(self.shape(*v), gv));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let data = gy.data().iter().zip(y.data()).map(|(&g, &o)| if o > S::zero() { g } else { S::zero() }).collect();
                    acc(grads, *x, Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::Silu(x) => {
                if self.wants(*x) {
                    let vx = self.value(*x).data();
                    let data = gy
                        .data()
                        .iter()
                        .zip(vx)
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (S::one() - s))
                        })
                        .collect();
                    acc(grads, *x, Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let vx = self.value(*x).data();
                    let data = gy.data().iter().zip(vx).map(|(&g, &v)| g * gelu_parts(v).1).collect();
                    acc(grads, *x, Tensor::from_vec(gy.shape(), data));
                }
            }
            Op::MatMul(a, b, d) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let g = gy.data();
                if self.wants(*a) {
                    // dA(m×k) = dC(m×n) · B^T
                    let mut ga = vec![S::zero(); va.len()];
                    for bi in 0..d.batch {
                        gemm(d.m, d.n, d.k, S::one(), g, d.c_view(bi), vb, d.b_view(bi).t(), S::zero(), &mut ga, d.a_view(bi));
                    }
                    acc(grads, *a, Tensor::from_vec(self.shape(*a), ga));
                }
                if self.wants(*b) {
                    // dB(k×n) = A^T · dC
                    let mut gb = vec![S::zero(); vb.len()];
                    for bi in 0..d.batch {
                        let beta = if d.b_shared && bi > 0 { S::one() } else { S::zero() };
                        gemm(d.k, d.m, d.n, S::one(), va, d.a_view(bi).t(), g, d.c_view(bi), beta, &mut gb, d.b_view(bi));
                    }
                    acc(grads, *b, Tensor::from_vec(self.shape(*b), gb));
                }
            }
            Op::Conv2d(x, w, d) => {
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let ckk = d.cin * d.k * d.k;
                let hw = d.ho * d.wo;
                let in_sz = d.cin * d.h * d.w;
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut gw = if want_w { vec![S::zero(); vw.len()] } else { Vec::new() };
                let mut gx = if want_x { vec![S::zero(); vx.len()] } else { Vec::new() };
                let mut cols = if d.is_pointwise() { Vec::new() } else { vec![S::zero(); ckk * hw] };
                let mut dcols = if want_x && !d.is_pointwise() { vec![S::zero(); ckk * hw] } else { Vec::new() };
                for ni in 0..d.n {
                    let gyv = MatView::row_major(ni * d.cout * hw, hw);
                    if want_w {
                        let xs = &vx[ni * in_sz..(ni + 1) * in_sz];
                        let src: &[S] = if d.is_pointwise() {
                            xs
                        } else {
                            d.im2col(xs, &mut cols);
                            &cols
                        };
                        gemm(d.cout, hw, ckk, S::one(), gy.data(), gyv, src, MatView::row_major(0, hw).t(), S::one(), &mut gw, MatView::row_major(0, ckk));
                    }
                    if want_x {
                        let wt = MatView::row_major(0, ckk).t();
                        if d.is_pointwise() {
                            gemm(ckk, d.cout, hw, S::one(), vw, wt, gy.data(), gyv, S::zero(), &mut gx, MatView::row_major(ni * in_sz, hw));
                        } else {
                            gemm(ckk, d.cout, hw, S::one(), vw, wt, gy.data(), gyv, S::zero(), &mut dcols, MatView::row_major(0, hw));
                            d.col2im(&dcols, &mut gx[ni * in_sz..(ni + 1) * in_sz]);
                        }
                    }
                }
                if want_w {
                    acc(grads, *w, Tensor::from_vec(self.shape(*w), gw));
                }
                if want_x {
                    acc(grads, *x, Tensor::from_vec(self.shape(*x), gx));
                }
            }
            Op::Upsample2x { x, planes, h, w } => {
                if self.wants(*x) {
                    let mut gx = vec![S::zero(); planes * h * w];
                    for p in 0..*planes {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(p * h + yy / 2) * w + xx / 2] += gy.data()[(p * 2 * h + yy) * 2 * w + xx];
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(self.shape(*x), gx));
                }
            }
            Op::AvgPool { x, planes, h, w, g } => {
                if self.wants(*x) {
                    let (h, w, g) = (*h, *w, *g);
                    let mut gx = vec![S::zero(); planes * h * w];
                    for p in 0..*planes {
                        for i in 0..g {
                            let (y0, y1) = pool_window(i, h, g);
                            for j in 0..g {
                                let (x0, x1) = pool_window(j, w, g);
                                let share = gy.data()[(p * g + i) * g + j] / S::c(((y1 - y0) * (x1 - x0)) as f64);
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        gx[(p * h + yy) * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(self.shape(*x), gx));
                }
            }
            Op::NormRows { x, k, inv_std } => {
                if self.wants(*x) {
                    let k = *k;
                    let kk = S::c(k as f64);
                    let mut gx = vec![S::zero(); gy.numel()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let g = &gy.data()[r * k..(r + 1) * k];
                        let yh = &y.data()[r * k..(r + 1) * k];
                        let mg = g.iter().copied().sum::<S>() / kk;
                        let mgy = g.iter().zip(yh).map(|(&a, &b)| a * b).sum::<S>() / kk;
                        for ((o, &gi), &yi) in gx[r * k..(r + 1) * k].iter_mut().zip(g).zip(yh) {
                            *o = inv * (gi - mg - yi * mgy);
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(gy.shape(), gx));
                }
            }
            Op::Swap12 { x, dims } => {
                if self.wants(*x) {
                    let [a, b, c, d] = *dims;
                    let mut gx = vec![S::zero(); gy.numel()];
                    for ai in 0..a {
                        for bi in 0..b {
                            for ci in 0..c {
                                let s = ((ai * b + bi) * c + ci) * d;
                                let t = ((ai * c + ci) * b + bi) * d;
                                gx[s..s + d].copy_from_slice(&gy.data()[t..t + d]);
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(self.shape(*x), gx));
                }
            }
            Op::Softmax { x, k } => {
                if self.wants(*x) {
                    let k = *k;
                    let mut gx = vec![S::zero(); gy.numel()];
                    for r in 0..gy.numel() / k {
                        let p = &y.data()[r * k..(r + 1) * k];
                        let g = &gy.data()[r * k..(r + 1) * k];
                        let dot = p.iter().zip(g).map(|(&a, &b)| a * b).sum::<S>();
                        for ((o, &pi), &gi) in gx[r * k..(r + 1) * k].iter_mut().zip(p).zip(g) {
                            *o = pi * (gi - dot);
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(gy.shape(), gx));
                }
            }
            Op::Concat { parts, outer, cs, inner } => {
                let total: usize = cs.iter().sum();
                let mut off = 0;
                for (&p, &c) in parts.iter().zip(cs) {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * c * inner);
                        for o in 0..*outer {
                            let s = (o * total + off) * inner;
                            gp.extend_from_slice(&gy.data()[s..s + c * inner]);
                        }
                        acc(grads, p, Tensor::from_vec(self.shape(p), gp));
                    }
                    off += c;
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    acc(grads, *x, gy.clone().reshape(self.shape(*x)));
                }
            }
            Op::Mse { pred, target } => {
                if self.wants(*pred) {
                    let vp = self.value(*pred);
                    let s = gy.data()[0] * S::c(2.0 / vp.numel() as f64);
                    let data = vp.data().iter().zip(target.data()).map(|(&p, &t)| s * (p - t)).collect();
                    acc(grads, *pred, Tensor::from_vec(vp.shape(), data));
                }
            }
            Op::L1 { pred, target } => {
                if self.wants(*pred) {
                    let vp = self.value(*pred);
                    let s = gy.data()[0] / S::c(vp.numel() as f64);
                    let data = vp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            let d = p - t;
                            if d > S::zero() {
                                s
                            } else if d < S::zero() {
                                -s
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    acc(grads, *pred, Tensor::from_vec(vp.shape(), data));
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<ParamKey, Var>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a node, `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter; `None` for frozen or unused parameters.
    pub fn param(&self, p: &Param<S>) -> Option<&Tensor<S>> {
        self.params.get(&p.key()).and_then(|v| self.wrt(*v))
    }

    /// Euclidean norm of a parameter gradient, zero when absent.
    pub fn param_norm(&self, p: &Param<S>) -> S {
        self.param(p).map(|g| g.norm()).unwrap_or_else(S::zero)
    }
}
