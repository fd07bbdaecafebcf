//! Desk-scale conditional U-Net operating directly on pixels.

use std::path::Path;

use orca_tape::{Graph, Module, Param, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    AttnCapture, Backend, BackendDescriptor, DenoiseOutput, DenoiseRequest, LatentTensor, Space, DOWN_1, DOWN_2,
    DOWN_3, MID, UP_0, UP_1, UP_2,
};
use crate::archive::{Archive, Entry};
use crate::error::contract;
use crate::nn::{attention, sinusoidal, Conv2d, GroupNorm, Init, Linear};
use crate::{Error, Frame, Result};

pub const TOY_BACKEND_ID: &str = "toy_unet";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyUNetConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    /// Widths of `down_1`, `down_2`, `down_3`; `mid` reuses the last one.
    pub widths: [usize; 3],
    pub condition_dim: usize,
    pub max_condition_len: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub seed: u64,
}

impl Default for ToyUNetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: 16,
            widths: [16, 32, 64],
            condition_dim: 32,
            max_condition_len: 77,
            heads: 2,
            time_dim: 32,
            groups: 4,
            seed: 0x5eed_0001,
        }
    }
}

fn halve(n: usize) -> usize {
    // stride-2 convolution, kernel 3, padding 1
    (n + 2 - 3) / 2 + 1
}

impl ToyUNetConfig {
    /// Spatial size after each block, in tap-point order.
    fn sizes(&self) -> [usize; 7] {
        let d1 = halve(self.image_size);
        let d2 = halve(d1);
        let d3 = halve(d2);
        let mid = halve(d3);
        [d1, d2, d3, mid, d3, d2, d1]
    }

    pub fn descriptor(&self) -> BackendDescriptor {
        let [w1, w2, w3] = self.widths;
        let s = self.sizes();
        let chans = [w1, w2, w3, w3, w3, w2, w1];
        let tap_points = [DOWN_1, DOWN_2, DOWN_3, MID, UP_0, UP_1, UP_2].iter().map(|s| s.to_string()).collect();
        BackendDescriptor {
            backend_id: TOY_BACKEND_ID.to_string(),
            tap_points,
            latent_shape: (3, self.image_size, self.image_size),
            condition_dim: self.condition_dim,
            max_condition_len: self.max_condition_len,
            tap_shapes: (0..7).map(|i| (chans[i], s[i], s[i])).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock<S> {
    norm1: GroupNorm<S>,
    conv1: Conv2d<S>,
    time: Linear<S>,
    norm2: GroupNorm<S>,
    conv2: Conv2d<S>,
    skip: Option<Conv2d<S>>,
}

impl<S: Scalar> ResBlock<S> {
    fn new<R: rand::Rng>(init: &mut Init<R>, name: &str, cin: usize, cout: usize, cfg: &ToyUNetConfig) -> Self {
        Self {
            norm1: GroupNorm::new(init, &format!("{name}.norm1"), cin, cfg.groups),
            conv1: Conv2d::new(init, &format!("{name}.conv1"), cin, cout, 3, 1, 1, 2f64.sqrt()),
            time: Linear::new(init, &format!("{name}.time"), 2 * cfg.time_dim, cout),
            norm2: GroupNorm::new(init, &format!("{name}.norm2"), cout, cfg.groups),
            conv2: Conv2d::new(init, &format!("{name}.conv2"), cout, cout, 3, 1, 1, 1.0),
            skip: (cin != cout).then(|| Conv2d::new(init, &format!("{name}.skip"), cin, cout, 1, 1, 0, 1.0)),
        }
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let s = g.shape(h).to_vec();
        let t = self.time.forward(g, temb); // [N, C]
        let h = g.add_bcast(h, t, 1, s[2] * s[3]);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(skip, h)
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.norm1.params();
        p.extend(self.conv1.params());
        p.extend(self.time.params());
        p.extend(self.norm2.params());
        p.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.norm1.params_mut();
        p.extend(self.conv1.params_mut());
        p.extend(self.time.params_mut());
        p.extend(self.norm2.params_mut());
        p.extend(self.conv2.params_mut());
        if let Some(s) = &mut self.skip {
            p.extend(s.params_mut());
        }
        p
    }
}

/// Spatial queries attending over the condition tokens.
#[derive(Debug, Clone)]
struct CrossAttn<S> {
    norm: GroupNorm<S>,
    q: Linear<S>,
    k: Linear<S>,
    v: Linear<S>,
    out: Linear<S>,
    heads: usize,
}

impl<S: Scalar> CrossAttn<S> {
    fn new<R: rand::Rng>(init: &mut Init<R>, name: &str, c: usize, cfg: &ToyUNetConfig) -> Self {
        Self {
            norm: GroupNorm::new(init, &format!("{name}.norm"), c, cfg.groups),
            q: Linear::new(init, &format!("{name}.q"), c, c),
            k: Linear::new(init, &format!("{name}.k"), cfg.condition_dim, c),
            v: Linear::new(init, &format!("{name}.v"), cfg.condition_dim, c),
            out: Linear::new(init, &format!("{name}.out"), c, c),
            heads: cfg.heads,
        }
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var, cond: Var, block: &str, record: Option<&mut Vec<AttnCapture>>) -> Var {
        let s = g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hn = self.norm.forward(g, x);
        let tokens = g.swap12(hn, [n, c, h * w, 1]);
        let tokens = g.reshape(tokens, &[n, h * w, c]);
        let q = self.q.forward(g, tokens);
        let k = self.k.forward(g, cond);
        let v = self.v.forward(g, cond);
        let (a, trace) = attention(g, q, k, v, self.heads, false);
        if let Some(rec) = record {
            rec.push(AttnCapture { block: block.to_string(), trace, height: h, width: w });
        }
        let a = self.out.forward(g, a);
        let a = g.swap12(a, [n, h * w, c, 1]);
        let a = g.reshape(a, &[n, c, h, w]);
        g.add(x, a)
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.norm.params();
        for l in [&self.q, &self.k, &self.v, &self.out] {
            p.extend(l.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.norm.params_mut();
        for l in [&mut self.q, &mut self.k, &mut self.v, &mut self.out] {
            p.extend(l.params_mut());
        }
        p
    }
}

#[derive(Debug, Clone)]
struct DownBlock<S> {
    down: Conv2d<S>,
    res: ResBlock<S>,
    attn: CrossAttn<S>,
}

#[derive(Debug, Clone)]
struct UpBlock<S> {
    res: ResBlock<S>,
    attn: CrossAttn<S>,
}

/// Three down blocks, a bottleneck and three up blocks, with cross-attention
/// to the condition in every block. Randomly initialized and frozen unless a
/// checkpoint is loaded.
#[derive(Debug, Clone)]
pub struct ToyUNet<S> {
    config: ToyUNetConfig,
    descriptor: BackendDescriptor,
    time1: Linear<S>,
    time2: Linear<S>,
    stem: Conv2d<S>,
    downs: Vec<DownBlock<S>>,
    mid_down: Conv2d<S>,
    mid_res1: ResBlock<S>,
    mid_attn: CrossAttn<S>,
    mid_res2: ResBlock<S>,
    ups: Vec<UpBlock<S>>,
    out_norm: GroupNorm<S>,
    out_conv: Conv2d<S>,
}

impl<S: Scalar> ToyUNet<S> {
    pub fn new(config: ToyUNetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut rng, false);
        let td = config.time_dim;
        let [w1, w2, w3] = config.widths;
        let stem_c = config.stem_channels;
        let time1 = Linear::new(&mut init, "time.fc1", td, 2 * td);
        let time2 = Linear::new(&mut init, "time.fc2", 2 * td, 2 * td);
        let stem = Conv2d::new(&mut init, "stem", 3, stem_c, 3, 1, 1, 1.0);
        let mut downs = Vec::new();
        let mut cin = stem_c;
        for (i, &c) in config.widths.iter().enumerate() {
            let name = format!("down_{}", i + 1);
            downs.push(DownBlock {
                down: Conv2d::new(&mut init, &format!("{name}.down"), cin, c, 3, 2, 1, 1.0),
                res: ResBlock::new(&mut init, &format!("{name}.res"), c, c, &config),
                attn: CrossAttn::new(&mut init, &format!("{name}.attn"), c, &config),
            });
            cin = c;
        }
        let mid_down = Conv2d::new(&mut init, "mid.down", w3, w3, 3, 2, 1, 1.0);
        let mid_res1 = ResBlock::new(&mut init, "mid.res1", w3, w3, &config);
        let mid_attn = CrossAttn::new(&mut init, "mid.attn", w3, &config);
        let mid_res2 = ResBlock::new(&mut init, "mid.res2", w3, w3, &config);
        // (input from below, skip, output)
        let plan = [(w3, w3, w3), (w3, w2, w2), (w2, w1, w1)];
        let ups = plan
            .iter()
            .enumerate()
            .map(|(i, &(below, skip, out))| UpBlock {
                res: ResBlock::new(&mut init, &format!("up_{i}.res"), below + skip, out, &config),
                attn: CrossAttn::new(&mut init, &format!("up_{i}.attn"), out, &config),
            })
            .collect();
        let out_norm = GroupNorm::new(&mut init, "out.norm", w1 + stem_c, config.groups);
        let out_conv = Conv2d::new(&mut init, "out.conv", w1 + stem_c, 3, 3, 1, 1, 1.0);
        let descriptor = config.descriptor();
        Self {
            config,
            descriptor,
            time1,
            time2,
            stem,
            downs,
            mid_down,
            mid_res1,
            mid_attn,
            mid_res2,
            ups,
            out_norm,
            out_conv,
        }
    }

    pub fn config(&self) -> &ToyUNetConfig {
        &self.config
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut a = Archive::new(json!({
            "backend_id": TOY_BACKEND_ID,
            "image_size": self.config.image_size,
            "seed": self.config.seed,
        }));
        for p in Module::params(self) {
            a.insert(p.name.clone(), Entry::tensor(&p.value));
        }
        a.save(path)
    }

    /// Replaces every parameter with the stored value of the same name.
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let a = Archive::load(path.as_ref())?;
        for p in self.params_mut() {
            let t: Tensor<S> = a.get(&p.name)?.to_tensor()?;
            if t.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "checkpoint entry `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }

    fn time_embedding<'a>(&'a self, g: &mut Graph<'a, S>, timesteps: &[usize]) -> Var {
        let td = self.config.time_dim;
        let data: Vec<f64> = timesteps.iter().flat_map(|&t| sinusoidal(t as f64, td)).collect();
        let e = g.constant(Tensor::from_f64(&[timesteps.len(), td], &data));
        let e = self.time1.forward(g, e);
        let e = g.silu(e);
        let e = self.time2.forward(g, e);
        g.silu(e)
    }
}

impl<S: Scalar> Module<S> for ToyUNet<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.time1.params();
        p.extend(self.time2.params());
        p.extend(self.stem.params());
        for d in &self.downs {
            p.extend(d.down.params());
            p.extend(d.res.params());
            p.extend(d.attn.params());
        }
        p.extend(self.mid_down.params());
        p.extend(self.mid_res1.params());
        p.extend(self.mid_attn.params());
        p.extend(self.mid_res2.params());
        for u in &self.ups {
            p.extend(u.res.params());
            p.extend(u.attn.params());
        }
        p.extend(self.out_norm.params());
        p.extend(self.out_conv.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.time1.params_mut();
        p.extend(self.time2.params_mut());
        p.extend(self.stem.params_mut());
        for d in &mut self.downs {
            p.extend(d.down.params_mut());
            p.extend(d.res.params_mut());
            p.extend(d.attn.params_mut());
        }
        p.extend(self.mid_down.params_mut());
        p.extend(self.mid_res1.params_mut());
        p.extend(self.mid_attn.params_mut());
        p.extend(self.mid_res2.params_mut());
        for u in &mut self.ups {
            p.extend(u.res.params_mut());
            p.extend(u.attn.params_mut());
        }
        p.extend(self.out_norm.params_mut());
        p.extend(self.out_conv.params_mut());
        p
    }
}

/// Upsamples `x` to the spatial size of `skip` (no-op when they already
/// agree) and concatenates along channels.
fn merge_skip<S: Scalar>(g: &mut Graph<'_, S>, x: Var, skip: Var) -> Result<Var> {
    let (hx, hs) = (g.shape(x)[2], g.shape(skip)[2]);
    let up = if hx == hs {
        x
    } else if 2 * hx == hs {
        g.upsample2x(x)
    } else {
        return Err(Error::Config(format!("cannot merge {hx}x{hx} features into a {hs}x{hs} skip")));
    };
    Ok(g.concat(&[up, skip], 1))
}

impl<S: Scalar> Backend<S> for ToyUNet<S> {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    /// Pixel-space backend: the latent is the image itself.
    fn encode(&self, image: &Frame) -> Result<LatentTensor<S>> {
        let n = self.config.image_size;
        contract!(
            image.height == n && image.width == n,
            "toy backend expects {n}x{n} frames, got {}x{}",
            image.height,
            image.width
        );
        Ok(LatentTensor { values: image.to_chw(), space: Space::Pixel })
    }

    fn denoise_graph<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        z_t: Var,
        timesteps: &[usize],
        condition: Var,
        request: &DenoiseRequest,
    ) -> Result<DenoiseOutput> {
        let d = &self.descriptor;
        if !request.taps.is_empty() {
            d.validate_taps(&request.taps)?;
        }
        let zs = g.shape(z_t).to_vec();
        let (c, h, w) = d.latent_shape;
        contract!(zs.len() == 4 && zs[1..] == [c, h, w], "latent batch {zs:?} does not match {:?}", d.latent_shape);
        let n = zs[0];
        contract!(timesteps.len() == n, "{} timesteps for a batch of {n}", timesteps.len());
        let cs = g.shape(condition).to_vec();
        contract!(cs.len() == 3 && cs[0] == n, "condition batch {cs:?} does not match {n} latents");
        d.validate_condition(cs[1], cs[2])?;

        // deepest stage the request needs: 0..=3 down path, 4..=6 up path, 7 output head
        let depth = if request.predict_noise {
            7
        } else {
            request.taps.iter().filter_map(|t| d.tap_points.iter().position(|p| p == t)).max().unwrap_or(3)
        };
        let mut record = request.record_attention.then(Vec::new);
        let mut found: Vec<(usize, Var)> = Vec::new();

        let temb = self.time_embedding(g, timesteps);
        let stem = self.stem.forward(g, z_t);
        let mut x = stem;
        let mut skips = Vec::with_capacity(3);
        for (i, blk) in self.downs.iter().enumerate() {
            x = blk.down.forward(g, x);
            x = blk.res.forward(g, x, temb);
            x = blk.attn.forward(g, x, condition, &d.tap_points[i], record.as_mut());
            skips.push(x);
            found.push((i, x));
        }
        x = self.mid_down.forward(g, x);
        x = self.mid_res1.forward(g, x, temb);
        x = self.mid_attn.forward(g, x, condition, MID, record.as_mut());
        x = self.mid_res2.forward(g, x, temb);
        found.push((3, x));
        for (i, blk) in self.ups.iter().enumerate() {
            if depth < 4 + i {
                break;
            }
            let skip = skips[2 - i];
            x = merge_skip(g, x, skip)?;
            x = blk.res.forward(g, x, temb);
            x = blk.attn.forward(g, x, condition, &d.tap_points[4 + i], record.as_mut());
            found.push((4 + i, x));
        }
        let noise_pred = if request.predict_noise {
            let y = merge_skip(g, x, stem)?;
            let y = self.out_norm.forward(g, y);
            let y = g.silu(y);
            Some(self.out_conv.forward(g, y))
        } else {
            None
        };
        let taps = request
            .taps
            .iter()
            .map(|t| {
                let idx = d.tap_points.iter().position(|p| p == t).expect("validated");
                let v = found.iter().find(|(i, _)| *i == idx).expect("stage computed").1;
                (t.clone(), v)
            })
            .collect();
        Ok(DenoiseOutput { taps, attention: record.unwrap_or_default(), noise_pred })
    }

    fn params(&self) -> Vec<&Param<S>> {
        Module::params(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn declared_geometry() {
        let d = ToyUNetConfig::default().descriptor();
        let sizes: Vec<_> = d.tap_shapes.iter().map(|s| s.1).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 8, 16, 32]);
        let small = ToyUNetConfig { image_size: 8, ..Default::default() }.descriptor();
        let sizes: Vec<_> = small.tap_shapes.iter().map(|s| s.1).collect();
        assert_eq!(sizes, vec![4, 2, 1, 1, 1, 2, 4]);
    }
}
