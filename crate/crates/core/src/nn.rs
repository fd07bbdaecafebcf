//! Layer building blocks shared by the toy encoders, the denoiser and the
//! trainable heads.

use orca_tape::{Graph, Param, Scalar, Tensor, Var};
use rand::Rng;

/// Initializer bundling the RNG, a name prefix and the trainable flag.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
    pub trainable: bool,
}

impl<'r, R: Rng> Init<'r, R> {
    pub fn new(rng: &'r mut R, trainable: bool) -> Self {
        Self { rng, trainable }
    }

    pub fn normal<S: Scalar>(&mut self, name: &str, shape: &[usize], std: f64) -> Param<S> {
        Param::new(name, Tensor::randn(shape, std, self.rng), self.trainable)
    }

    pub fn zeros<S: Scalar>(&mut self, name: &str, shape: &[usize]) -> Param<S> {
        Param::new(name, Tensor::zeros(shape), self.trainable)
    }

    pub fn ones<S: Scalar>(&mut self, name: &str, shape: &[usize]) -> Param<S> {
        Param::new(name, Tensor::full(shape, S::one()), self.trainable)
    }
}

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_std(init, name, d_in, d_out, (1.0 / d_in as f64).sqrt())
    }

    pub fn with_std<R: Rng>(init: &mut Init<R>, name: &str, d_in: usize, d_out: usize, std: f64) -> Self {
        Self {
            weight: init.normal(&format!("{name}.weight"), &[d_in, d_out], std),
            bias: init.zeros(&format!("{name}.bias"), &[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w);
        let rows = g.value(y).numel() / self.d_out();
        g.add_bcast(y, b, rows, 1)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Square-kernel convolution with bias, `x: [N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let std = gain * (1.0 / (cin * k * k) as f64).sqrt();
        Self {
            weight: init.normal(&format!("{name}.weight"), &[cout, cin, k, k], std),
            bias: init.zeros(&format!("{name}.bias"), &[cout]),
            stride,
            pad,
        }
    }

    pub fn cin(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.conv2d(x, w, self.stride, self.pad);
        let s = g.shape(y).to_vec();
        g.add_bcast(y, b, s[0], s[2] * s[3])
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Normalization over the last axis with learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, dim: usize) -> Self {
        Self { gamma: init.ones(&format!("{name}.gamma"), &[dim]), beta: init.zeros(&format!("{name}.beta"), &[dim]) }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Var {
        let d = self.gamma.value.numel();
        let rows = g.value(x).numel() / d;
        let y = g.normalize_rows(x, d, 1e-5);
        let gm = g.param(&self.gamma);
        let bt = g.param(&self.beta);
        let y = g.mul_bcast(y, gm, rows, 1);
        g.add_bcast(y, bt, rows, 1)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Group normalization over `[N, C, H, W]`.
#[derive(Debug, Clone)]
pub struct GroupNorm<S> {
    pub groups: usize,
    pub gamma: Param<S>,
    pub beta: Param<S>,
}

impl<S: Scalar> GroupNorm<S> {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "{name}: {channels} channels not divisible into {groups} groups");
        Self {
            groups,
            gamma: init.ones(&format!("{name}.gamma"), &[channels]),
            beta: init.zeros(&format!("{name}.beta"), &[channels]),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let y = g.normalize_rows(x, c / self.groups * hw, 1e-5);
        let gm = g.param(&self.gamma);
        let bt = g.param(&self.beta);
        let y = g.mul_bcast(y, gm, n, hw);
        g.add_bcast(y, bt, n, hw)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Raw scores and probabilities of one attention call, laid out
/// `[batch * heads, queries, keys]`.
#[derive(Debug, Clone, Copy)]
pub struct AttnTrace {
    pub scores: Var,
    pub probs: Var,
    pub heads: usize,
}

/// Scaled dot-product attention, `q: [N, Lq, D]`, `k, v: [N, Lk, D]`.
pub fn attention<S: Scalar>(g: &mut Graph<'_, S>, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> (Var, AttnTrace) {
    let sq = g.shape(q).to_vec();
    let sk = g.shape(k).to_vec();
    let (n, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let split = |g: &mut Graph<'_, S>, x: Var, l: usize| {
        let x = g.swap12(x, [n, l, heads, dh]);
        g.reshape(x, &[n * heads, l, dh])
    };
    let qh = split(g, q, lq);
    let kh = split(g, k, lk);
    let vh = split(g, v, lk);
    let scores = g.matmul_t(qh, kh, false, true);
    let scores = g.scale(scores, S::c(1.0 / (dh as f64).sqrt()));
    let probs = g.softmax(scores, lk, causal);
    let out = g.matmul(probs, vh);
    let out = g.swap12(out, [n, heads, lq, dh]);
    let out = g.reshape(out, &[n, lq, d]);
    (out, AttnTrace { scores, probs, heads })
}

/// Pre-norm transformer block over `[N, L, D]`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<S> {
    pub ln1: LayerNorm<S>,
    pub qkv: [Linear<S>; 3],
    pub out: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
    pub heads: usize,
    pub causal: bool,
}

impl<S: Scalar> TransformerBlock<S> {
    pub fn new<R: Rng>(init: &mut Init<R>, name: &str, dim: usize, heads: usize, causal: bool) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim),
            qkv: [
                Linear::new(init, &format!("{name}.q"), dim, dim),
                Linear::new(init, &format!("{name}.k"), dim, dim),
                Linear::new(init, &format!("{name}.v"), dim, dim),
            ],
            out: Linear::new(init, &format!("{name}.out"), dim, dim),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim),
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, 4 * dim),
            fc2: Linear::new(init, &format!("{name}.fc2"), 4 * dim, dim),
            heads,
            causal,
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let q = self.qkv[0].forward(g, h);
        let k = self.qkv[1].forward(g, h);
        let v = self.qkv[2].forward(g, h);
        let (a, _) = attention(g, q, k, v, self.heads, self.causal);
        let a = self.out.forward(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let h = self.fc1.forward(g, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h);
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.ln1.params();
        for l in &self.qkv {
            p.extend(l.params());
        }
        p.extend(self.out.params());
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.ln1.params_mut();
        for l in &mut self.qkv {
            p.extend(l.params_mut());
        }
        p.extend(self.out.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.fc1.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }
}

/// Sinusoidal embedding of a scalar position, width `dim` (even).
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut rng, false);
        let ln = LayerNorm::<f64>::new(&mut init, "ln", 8);
        let x = Tensor::randn(&[3, 8], 3.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = ln.forward(&mut g, xv);
        for r in 0..3 {
            let row = &g.value(y).data()[r * 8..(r + 1) * 8];
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn causal_block_ignores_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut init = Init::new(&mut rng, false);
        let block = TransformerBlock::<f64>::new(&mut init, "b", 8, 2, true);
        let x = Tensor::randn(&[1, 4, 8], 1.0, &mut rng);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[3 * 8..] {
            *v += 1.0;
        }
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = block.forward(&mut g, xv);
            g.value(y).clone()
        };
        let (a, b) = (run(x), run(x2));
        assert_eq!(&a.data()[..3 * 8], &b.data()[..3 * 8]);
        assert_ne!(&a.data()[3 * 8..], &b.data()[3 * 8..]);
    }
}
