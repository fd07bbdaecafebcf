//! Per-tap compression heads (3×3 conv, batch norm, ReLU, flatten) and
//! their fusion into one state vector.

use orca_tape::{Graph, Module, Param, Scalar, Tensor, Var};
use rand::Rng;

use crate::backbone::{BackendDescriptor, FeatureBundle};
use crate::error::contract;
use crate::nn::{Conv2d, Init};
use crate::{Error, Result};

pub const DEFAULT_COMPRESS_DIM: usize = 48;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics of one head, per channel, from a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased estimate, as accumulated into the running variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CompressionHead<S> {
    pub block: String,
    pub conv: Conv2d<S>,
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl<S: Scalar> CompressionHead<S> {
    pub fn new<R: Rng>(init: &mut Init<R>, block: &str, cin: usize, dim: usize) -> Self {
        Self {
            block: block.to_string(),
            conv: Conv2d::new(init, &format!("compress.{block}.conv"), cin, dim, 3, 1, 1, 2f64.sqrt()),
            gamma: init.ones(&format!("compress.{block}.bn.gamma"), &[dim]),
            beta: init.zeros(&format!("compress.{block}.bn.beta"), &[dim]),
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.conv.cout()
    }

    /// `x: [N, C, H, W]` to `[N, dim·H·W]`. Training mode normalizes with
    /// batch statistics and returns them for [`Self::absorb`].
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var, train: bool) -> Result<(Var, Option<BatchStats>)> {
        let s = g.shape(x).to_vec();
        contract!(s.len() == 4, "feature batch must be [N, C, H, W], got {s:?}");
        contract!(
            s[1] == self.conv.cin(),
            "tap `{}` has {} channels, head expects {}",
            self.block,
            s[1],
            self.conv.cin()
        );
        let (n, hw) = (s[0], s[2] * s[3]);
        let c = self.dim();
        let y = self.conv.forward(g, x);
        let (y, stats) = if train {
            let stats = channel_stats(g.value(y), n, c, hw);
            let t = g.swap12(y, [1, n, c, hw]);
            let t = g.normalize_rows(t, n * hw, BN_EPS);
            let t = g.swap12(t, [1, c, n, hw]);
            (g.reshape(t, &[n, c, s[2], s[3]]), Some(stats))
        } else {
            let inv: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let shift: Vec<f64> = self.running_mean.iter().zip(&inv).map(|(m, i)| -m * i).collect();
            let inv = g.constant(Tensor::from_f64(&[c], &inv));
            let shift = g.constant(Tensor::from_f64(&[c], &shift));
            let t = g.mul_bcast(y, inv, n, hw);
            (g.add_bcast(t, shift, n, hw), None)
        };
        let gm = g.param(&self.gamma);
        let bt = g.param(&self.beta);
        let y = g.mul_bcast(y, gm, n, hw);
        let y = g.add_bcast(y, bt, n, hw);
        let y = g.relu(y);
        Ok((g.reshape(y, &[n, c * hw]), stats))
    }

    /// Folds batch statistics into the running estimates.
    pub fn absorb(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

fn channel_stats<S: Scalar>(y: &Tensor<S>, n: usize, c: usize, hw: usize) -> BatchStats {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals = (0..n).flat_map(|i| y.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().map(|v| v.as_f64()));
        let m = vals.clone().sum::<f64>() / count;
        let ss: f64 = vals.map(|v| (v - m) * (v - m)).sum();
        mean[ch] = m;
        var[ch] = if count > 1.0 { ss / (count - 1.0) } else { 0.0 };
    }
    BatchStats { mean, var }
}

/// One head per tap point, applied in tap order.
#[derive(Debug, Clone)]
pub struct Compression<S> {
    pub dim: usize,
    pub heads: Vec<CompressionHead<S>>,
}

impl<S: Scalar> Compression<S> {
    pub fn new<R: Rng>(rng: &mut R, descriptor: &BackendDescriptor, taps: &[String], dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("compress.dim must be positive".into()));
        }
        descriptor.validate_taps(taps)?;
        let mut init = Init::new(rng, true);
        let heads = taps
            .iter()
            .map(|t| {
                let (c, _, _) = descriptor.tap_shape(t).expect("validated");
                CompressionHead::new(&mut init, t, c, dim)
            })
            .collect();
        Ok(Self { dim, heads })
    }

    pub fn head(&self, block: &str) -> Result<&CompressionHead<S>> {
        self.heads
            .iter()
            .find(|h| h.block == block)
            .ok_or_else(|| Error::Config(format!("no compression head for tap `{block}`")))
    }

    /// Length of the fused vector for the given tap shapes.
    pub fn fused_len(&self, descriptor: &BackendDescriptor, taps: &[String]) -> Result<usize> {
        taps.iter()
            .map(|t| {
                self.head(t)?;
                let (_, h, w) = descriptor
                    .tap_shape(t)
                    .ok_or_else(|| Error::Config(format!("unknown tap point `{t}`")))?;
                Ok(self.dim * h * w)
            })
            .sum()
    }

    /// Compresses each `(block, [N, C, H, W])` and concatenates in the given
    /// order, giving `[N, Σ dim·H·W]`.
    pub fn fuse_graph<'a>(&'a self, g: &mut Graph<'a, S>, taps: &[(String, Var)], train: bool) -> Result<(Var, Vec<(String, BatchStats)>)> {
        contract!(!taps.is_empty(), "nothing to fuse");
        let mut parts = Vec::with_capacity(taps.len());
        let mut stats = Vec::new();
        for (block, v) in taps {
            let (y, st) = self.head(block)?.forward(g, *v, train)?;
            parts.push(y);
            if let Some(st) = st {
                stats.push((block.clone(), st));
            }
        }
        let y = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1) };
        Ok((y, stats))
    }

    pub fn absorb(&mut self, stats: &[(String, BatchStats)]) {
        for (block, st) in stats {
            if let Some(h) = self.heads.iter_mut().find(|h| &h.block == block) {
                h.absorb(st);
            }
        }
    }

    /// Evaluation-mode compression of one feature map `[C, H, W]`.
    pub fn compress(&self, block: &str, feature_map: &Tensor<S>) -> Result<Vec<S>> {
        let s = feature_map.shape();
        contract!(s.len() == 3, "feature map must be [C, H, W], got {s:?}");
        let mut g = Graph::new();
        let x = g.constant(feature_map.clone().reshape(&[1, s[0], s[1], s[2]]));
        let (y, _) = self.head(block)?.forward(&mut g, x, false)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Evaluation-mode fusion of a bundle, in bundle order.
    pub fn fuse(&self, bundle: &FeatureBundle<S>) -> Result<Vec<S>> {
        let mut out = Vec::new();
        for (block, map) in &bundle.entries {
            out.extend(self.compress(block, map)?);
        }
        Ok(out)
    }
}

impl<S: Scalar> Module<S> for Compression<S> {
    fn params(&self) -> Vec<&Param<S>> {
        self.heads.iter().flat_map(|h| [&h.conv.weight, &h.conv.bias, &h.gamma, &h.beta]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.heads
            .iter_mut()
            .flat_map(|h| [&mut h.conv.weight, &mut h.conv.bias, &mut h.gamma, &mut h.beta])
            .collect()
    }
}
