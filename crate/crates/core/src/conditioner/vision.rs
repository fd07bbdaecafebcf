use orca_tape::{Graph, Module, Param, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{sinusoidal, Conv2d, Init, LayerNorm, TransformerBlock};
use crate::Frame;

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoderConfig {
    pub width: usize,
    pub patch: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        Self { width: 32, patch: 8, heads: 2, seed: 0x0e1e_0001 }
    }
}

/// Frozen patch-embedding encoder producing a dense grid of patch features.
#[derive(Debug, Clone)]
pub struct VisionEncoder<S> {
    patch: Conv2d<S>,
    block: TransformerBlock<S>,
    ln: LayerNorm<S>,
}

impl<S: Scalar> VisionEncoder<S> {
    pub fn new(config: &VisionEncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut rng, false);
        let c = config.width;
        let k = config.patch;
        Self {
            patch: Conv2d::new(&mut init, "vision.patch", 3, c, k, k, 0, 1.0),
            block: TransformerBlock::new(&mut init, "vision.block0", c, config.heads, false),
            ln: LayerNorm::new(&mut init, "vision.ln", c),
        }
    }

    pub fn width(&self) -> usize {
        self.patch.cout()
    }

    /// `[N, 3, H, W]` images to `[N, width, H / patch, W / patch]` features.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, images: Var) -> Var {
        let x = self.patch.forward(g, images);
        let s = g.shape(x).to_vec();
        let (n, c, gh, gw) = (s[0], s[1], s[2], s[3]);
        let hw = gh * gw;
        let pe = g.constant(position_grid(c, gh, gw));
        let x = g.add_bcast(x, pe, n, 1);
        let t = g.swap12(x, [n, c, hw, 1]);
        let t = g.reshape(t, &[n, hw, c]);
        let t = self.block.forward(g, t);
        let t = self.ln.forward(g, t);
        let x = g.swap12(t, [n, hw, c, 1]);
        g.reshape(x, &[n, c, gh, gw])
    }

    /// Dense features of one frame, `[width, gh, gw]`.
    pub fn dense(&self, frame: &Frame) -> Tensor<S> {
        let mut g = Graph::new();
        let x = g.constant(Frame::batch(&[frame]));
        let y = self.forward(&mut g, x);
        let t = g.value(y);
        t.clone().reshape(&t.shape()[1..])
    }
}

/// Fixed 2-D sinusoidal code, `[c, gh, gw]`: first half of the channels
/// encode the row, second half the column.
fn position_grid<S: Scalar>(c: usize, gh: usize, gw: usize) -> Tensor<S> {
    let half = c / 2;
    let mut out = vec![0.0; c * gh * gw];
    for r in 0..gh {
        for col in 0..gw {
            let er = sinusoidal(r as f64, half);
            let ec = sinusoidal(col as f64, c - half);
            for (ch, v) in er.iter().chain(ec.iter()).enumerate() {
                out[(ch * gh + r) * gw + col] = *v;
            }
        }
    }
    Tensor::from_f64(&[c * gh * gw], &out)
}

impl<S: Scalar> Module<S> for VisionEncoder<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.patch.params();
        p.extend(self.block.params());
        p.extend(self.ln.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.patch.params_mut();
        p.extend(self.block.params_mut());
        p.extend(self.ln.params_mut());
        p
    }
}
