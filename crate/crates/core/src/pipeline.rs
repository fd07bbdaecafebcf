//! Wiring of frozen backbone, conditioner and trainable heads into one
//! observation-to-state-vector pass.

use std::sync::Arc;

use orca_tape::{Graph, Scalar, Tensor, Var};

use crate::backbone::{prepare_latents, Backend, DenoiseRequest, NoiseSchedule, ToyUNet, ToyUNetConfig, TOY_BACKEND_ID};
use crate::compression::{BatchStats, Compression};
use crate::conditioner::{caption, Caption, ConditionVariant, Conditioner, Layout, PromptBank};
use crate::config::RunConfig;
use crate::error::contract;
use crate::{Error, Frame, Result};

/// Frames per denoiser call when precomputing features.
const CACHE_CHUNK: usize = 16;

/// Everything frozen about a run: backbone, encoders, schedule, the
/// condition layout and the extraction settings.
pub struct Pipeline<S: Scalar> {
    pub backend: Arc<dyn Backend<S>>,
    pub conditioner: Arc<Conditioner<S>>,
    pub schedule: NoiseSchedule,
    pub variant: ConditionVariant,
    pub layout: Layout,
    pub timestep: usize,
    pub taps: Vec<String>,
    pub compress_dim: usize,
    pub l_t: usize,
    pub l_v: usize,
    /// `[L, D]` condition of the variants without learned tokens.
    fixed_condition: Option<Tensor<S>>,
}

/// Precomputed frozen quantities for one observation frame.
#[derive(Debug, Clone)]
pub enum FrameCache<S> {
    /// Tap feature maps `[C, H, W]`, in tap order.
    Taps(Vec<Tensor<S>>),
    /// Dense vision features `[C, gh, gw]`.
    Dense(Tensor<S>),
}

#[derive(Clone, Copy)]
pub struct FrameInput<'f, S> {
    pub frame: &'f Frame,
    pub cache: Option<&'f FrameCache<S>>,
}

impl<S: Scalar> Pipeline<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backend: Arc<dyn Backend<S>>,
        conditioner: Arc<Conditioner<S>>,
        variant: ConditionVariant,
        l_t: usize,
        l_v: usize,
        captions: &Caption,
        timestep: usize,
        taps: Vec<String>,
        compress_dim: usize,
    ) -> Result<Self> {
        let schedule = NoiseSchedule::default();
        schedule.bar_alpha(timestep)?;
        let d = backend.descriptor();
        d.validate_taps(&taps)?;
        let layout = conditioner.variant_layout(variant, l_t, l_v, captions)?;
        d.validate_condition(layout.len(), conditioner.prompt_dim())?;
        let fixed_condition = if variant.is_learned() { None } else { Some(conditioner.encode(&layout, None, None)?.tokens) };
        Ok(Self { backend, conditioner, schedule, variant, layout, timestep, taps, compress_dim, l_t, l_v, fixed_condition })
    }

    /// Toy stack described by `config`, loading backbone weights from
    /// `backbone.checkpoint_path` when set.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let b = &config.backbone;
        if b.backend_id != TOY_BACKEND_ID {
            return Err(Error::Lookup { kind: "backend", name: b.backend_id.clone() });
        }
        let mut unet = ToyUNet::new(ToyUNetConfig::default());
        if !b.checkpoint_path.is_empty() {
            unet.load_weights(&b.checkpoint_path)?;
        }
        let c = &config.condition;
        Self::new(
            Arc::new(unet),
            Arc::new(Conditioner::default()),
            c.variant,
            c.l_t,
            c.l_v,
            caption(config.caption_key())?,
            b.timestep,
            config.taps().to_vec(),
            config.compress.dim,
        )
    }

    /// Fresh compression heads for this pipeline's taps.
    pub fn new_compression<R: rand::Rng>(&self, rng: &mut R) -> Result<Compression<S>> {
        Compression::new(rng, self.backend.descriptor(), &self.taps, self.compress_dim)
    }

    /// Fresh prompt bank, or `None` when the variant learns no tokens.
    pub fn new_bank<R: rand::Rng>(&self, rng: &mut R) -> Result<Option<PromptBank<S>>> {
        if !self.variant.is_learned() {
            return Ok(None);
        }
        let (t, v) = self.variant.prompt_lengths(self.l_t, self.l_v);
        self.conditioner.new_bank(rng, t, v).map(Some)
    }

    pub fn fused_len(&self) -> usize {
        let d = self.backend.descriptor();
        self.taps
            .iter()
            .map(|t| {
                let (_, h, w) = d.tap_shape(t).expect("taps validated");
                self.compress_dim * h * w
            })
            .sum()
    }

    pub fn condition_len(&self) -> usize {
        self.layout.len()
    }

    /// Tap features do not depend on anything trainable or random.
    pub fn taps_are_static(&self) -> bool {
        !self.variant.is_learned() && self.timestep == 0
    }

    /// Frozen per-frame quantities worth keeping across epochs.
    pub fn precompute(&self, frames: &[&Frame]) -> Result<Vec<Option<FrameCache<S>>>> {
        if self.taps_are_static() {
            let mut out = Vec::with_capacity(frames.len());
            for chunk in frames.chunks(CACHE_CHUNK) {
                let seeds = vec![0; chunk.len()];
                let mut g = Graph::new();
                let z = prepare_latents(self.backend.as_ref(), &self.schedule, chunk, 0, &seeds)?;
                let z = g.constant(z);
                let c = self.fixed_graph(&mut g, chunk.len());
                let req = DenoiseRequest { taps: self.taps.clone(), ..Default::default() };
                let res = self.backend.denoise_graph(&mut g, z, &vec![0; chunk.len()], c, &req)?;
                for i in 0..chunk.len() {
                    out.push(Some(FrameCache::Taps(res.taps.iter().map(|(_, v)| g.value(*v).index0(i)).collect())));
                }
            }
            Ok(out)
        } else if self.variant.is_learned() && self.layout.uses_visual() {
            Ok(frames.iter().map(|f| Some(FrameCache::Dense(self.conditioner.vision.dense(f)))).collect())
        } else {
            Ok(vec![None; frames.len()])
        }
    }

    fn fixed_graph<'a>(&'a self, g: &mut Graph<'a, S>, n: usize) -> Var {
        let c = self.fixed_condition.as_ref().expect("fixed variant");
        let s = c.shape();
        let data: Vec<S> = (0..n).flat_map(|_| c.data().iter().copied()).collect();
        g.constant(Tensor::from_vec(&[n, s[0], s[1]], data))
    }

    /// Condition batch `[N, L, D]` for the given frames.
    pub fn condition_graph<'a>(&'a self, g: &mut Graph<'a, S>, bank: Option<&'a PromptBank<S>>, inputs: &[FrameInput<'_, S>]) -> Result<Var> {
        let n = inputs.len();
        if !self.variant.is_learned() {
            return Ok(self.fixed_graph(g, n));
        }
        let bank = bank.ok_or_else(|| Error::Config(format!("variant `{}` needs a prompt bank", self.variant)))?;
        let dense = if self.layout.uses_visual() {
            let maps: Vec<Tensor<S>> = inputs
                .iter()
                .map(|i| match i.cache {
                    Some(FrameCache::Dense(t)) => t.clone(),
                    _ => self.conditioner.vision.dense(i.frame),
                })
                .collect();
            Some(g.constant(Tensor::stack(&maps.iter().collect::<Vec<_>>())))
        } else {
            None
        };
        self.conditioner.encode_graph(g, &self.layout, Some(bank), dense, n)
    }

    /// Fused state vectors `[N, fused_len]`. `noise_seeds[i]` drives the
    /// noise of frame `i` when the timestep is above zero.
    pub fn features_graph<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        bank: Option<&'a PromptBank<S>>,
        compression: &'a Compression<S>,
        inputs: &[FrameInput<'_, S>],
        noise_seeds: &[u64],
        train: bool,
    ) -> Result<(Var, Vec<(String, BatchStats)>)> {
        contract!(!inputs.is_empty(), "empty observation batch");
        contract!(inputs.len() == noise_seeds.len(), "one noise seed per frame required");
        let cached: Option<Vec<&Vec<Tensor<S>>>> = inputs
            .iter()
            .map(|i| match i.cache {
                Some(FrameCache::Taps(t)) => Some(t),
                _ => None,
            })
            .collect();
        let taps = match cached {
            Some(maps) if self.taps_are_static() => self
                .taps
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let parts: Vec<&Tensor<S>> = maps.iter().map(|m| &m[j]).collect();
                    (name.clone(), g.constant(Tensor::stack(&parts)))
                })
                .collect(),
            _ => {
                let frames: Vec<&Frame> = inputs.iter().map(|i| i.frame).collect();
                let z = prepare_latents(self.backend.as_ref(), &self.schedule, &frames, self.timestep, noise_seeds)?;
                let z = g.constant(z);
                let c = self.condition_graph(g, bank, inputs)?;
                let req = DenoiseRequest { taps: self.taps.clone(), ..Default::default() };
                self.backend.denoise_graph(g, z, &vec![self.timestep; inputs.len()], c, &req)?.taps
            }
        };
        compression.fuse_graph(g, &taps, train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cached_and_live_features_agree() {
        let p = Pipeline::<f64>::from_config(&{
            let mut c = RunConfig::default();
            c.condition.variant = ConditionVariant::Null;
            c
        })
        .unwrap();
        assert!(p.taps_are_static());
        let f = Frame::filled(64, 64, [30, 90, 200]);
        let cache = p.precompute(&[&f]).unwrap();
        let comp = p.new_compression(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let run = |cache: Option<&FrameCache<f64>>| {
            let mut g = Graph::new();
            let (y, _) = p.features_graph(&mut g, None, &comp, &[FrameInput { frame: &f, cache }], &[0], false).unwrap();
            g.value(y).clone()
        };
        let a = run(cache[0].as_ref());
        let b = run(None);
        assert_eq!(a.shape(), &[1, p.fused_len()]);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
