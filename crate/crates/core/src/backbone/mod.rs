//! Frozen conditional denoiser: latent encoding, forward noising and
//! intermediate feature taps.

mod pretrain;
mod schedule;
mod unet;

use std::sync::Arc;

use orca_tape::{Graph, Param, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioner::ConditionEmbedding;
use crate::error::contract;
use crate::nn::AttnTrace;
use crate::{Error, Frame, Result};

pub use pretrain::{described_frames, pretrain_denoiser, PretrainConfig};
pub use schedule::{noise_latent, NoiseSchedule};
pub use unet::{ToyUNet, ToyUNetConfig, TOY_BACKEND_ID};

pub const DOWN_1: &str = "down_1";
pub const DOWN_2: &str = "down_2";
pub const DOWN_3: &str = "down_3";
pub const MID: &str = "mid";
pub const UP_0: &str = "up_0";
pub const UP_1: &str = "up_1";
pub const UP_2: &str = "up_2";

/// Taps used when nothing else is configured: the downsampling path and the
/// bottleneck.
pub fn default_taps() -> Vec<String> {
    [DOWN_1, DOWN_2, DOWN_3, MID].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Pixel,
    Latent,
}

/// `[C, H, W]` array in pixel or autoencoder-latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor<S> {
    pub values: Tensor<S>,
    pub space: Space,
}

/// Feature maps tapped from named denoiser blocks, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<S> {
    pub entries: Vec<(String, Tensor<S>)>,
    pub timestep: usize,
    pub backend_id: String,
}

impl<S: Scalar> FeatureBundle<S> {
    pub fn get(&self, block: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(b, _)| b == block).map(|(_, t)| t)
    }

    pub fn block_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(b, _)| b.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub tap_points: Vec<String>,
    /// `(C, H, W)` of the latent fed to the denoiser.
    pub latent_shape: (usize, usize, usize),
    pub condition_dim: usize,
    pub max_condition_len: usize,
    /// `(C, H, W)` of every tap point, same order as `tap_points`.
    pub tap_shapes: Vec<(usize, usize, usize)>,
}

impl BackendDescriptor {
    pub fn tap_shape(&self, block: &str) -> Option<(usize, usize, usize)> {
        self.tap_points.iter().position(|b| b == block).map(|i| self.tap_shapes[i])
    }

    /// Checks a tap request against the published tap points.
    pub fn validate_taps(&self, taps: &[String]) -> Result<()> {
        if taps.is_empty() {
            return Err(Error::Config("at least one tap point is required".into()));
        }
        for (i, t) in taps.iter().enumerate() {
            if !self.tap_points.contains(t) {
                return Err(Error::Config(format!(
                    "unknown tap point `{t}` for backend `{}` (available: {})",
                    self.backend_id,
                    self.tap_points.join(", ")
                )));
            }
            if taps[..i].contains(t) {
                return Err(Error::Config(format!("tap point `{t}` requested twice")));
            }
        }
        Ok(())
    }

    pub fn validate_condition(&self, len: usize, width: usize) -> Result<()> {
        contract!(
            width == self.condition_dim,
            "condition width {width} differs from backend condition_dim {}",
            self.condition_dim
        );
        contract!(
            len >= 1 && len <= self.max_condition_len,
            "condition length {len} outside 1..={}",
            self.max_condition_len
        );
        Ok(())
    }
}

/// What a denoiser pass should produce besides running.
#[derive(Debug, Clone, Default)]
pub struct DenoiseRequest {
    pub taps: Vec<String>,
    pub record_attention: bool,
    pub predict_noise: bool,
}

/// One cross-attention call observed during a denoiser pass.
#[derive(Debug, Clone)]
pub struct AttnCapture {
    pub block: String,
    pub trace: AttnTrace,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DenoiseOutput {
    pub taps: Vec<(String, Var)>,
    pub attention: Vec<AttnCapture>,
    pub noise_pred: Option<Var>,
}

/// A pluggable frozen denoiser.
///
/// A backend publishes its [`BackendDescriptor`], maps images to latents and
/// runs the conditional denoiser on a tape. The condition enters every
/// cross-attention layer; whether gradients reach it is decided by the
/// caller's graph, never by the backend, whose parameters stay read-only.
pub trait Backend<S: Scalar>: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn encode(&self, image: &Frame) -> Result<LatentTensor<S>>;

    /// Batched pass: `z_t: [N, C, H, W]`, `condition: [N, L, D]`.
    fn denoise_graph<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        z_t: Var,
        timesteps: &[usize],
        condition: Var,
        request: &DenoiseRequest,
    ) -> Result<DenoiseOutput>;

    fn params(&self) -> Vec<&Param<S>>;

    /// Single-sample convenience pass returning plain tensors.
    fn denoise(
        &self,
        z_t: &LatentTensor<S>,
        timestep: usize,
        condition: &Tensor<S>,
        taps: &[String],
    ) -> Result<FeatureBundle<S>> {
        let d = self.descriptor();
        d.validate_taps(taps)?;
        let cs = condition.shape();
        contract!(cs.len() == 2, "condition must be [L, D], got {cs:?}");
        d.validate_condition(cs[0], cs[1])?;
        let mut g = Graph::new();
        let mut zs = vec![1];
        zs.extend_from_slice(z_t.values.shape());
        let z = g.constant(z_t.values.clone().reshape(&zs));
        let c = g.constant(condition.clone().reshape(&[1, cs[0], cs[1]]));
        let out = self.denoise_graph(
            &mut g,
            z,
            &[timestep],
            c,
            &DenoiseRequest { taps: taps.to_vec(), ..Default::default() },
        )?;
        let entries = out
            .taps
            .iter()
            .map(|(b, v)| {
                let t = g.value(*v);
                (b.clone(), t.clone().reshape(&t.shape()[1..]))
            })
            .collect();
        Ok(FeatureBundle { entries, timestep, backend_id: d.backend_id.clone() })
    }

    fn checksum(&self) -> u64 {
        orca_tape::checksum(self.params())
    }
}

/// Feature extraction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    pub timestep: usize,
    pub taps: Vec<String>,
    /// Seed of the Gaussian noise mixed in at `timestep > 0`.
    pub noise_seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { timestep: 0, taps: default_taps(), noise_seed: 0 }
    }
}

/// Standard normal noise shaped like `shape`, fully determined by `seed`.
pub fn seeded_noise<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Encodes and noises a batch of frames into `[N, C, H, W]`.
///
/// `noise_seeds[i]` drives the noise of frame `i`; it is ignored at
/// timestep 0, where no noise is mixed in.
pub fn prepare_latents<S: Scalar>(
    backend: &dyn Backend<S>,
    schedule: &NoiseSchedule,
    frames: &[&Frame],
    timestep: usize,
    noise_seeds: &[u64],
) -> Result<Tensor<S>> {
    contract!(frames.len() == noise_seeds.len(), "one noise seed per frame required");
    contract!(!frames.is_empty(), "empty frame batch");
    schedule.bar_alpha(timestep)?;
    let mut parts = Vec::with_capacity(frames.len());
    for (f, &seed) in frames.iter().zip(noise_seeds) {
        let z0 = backend.encode(f)?;
        let z = if timestep == 0 {
            z0
        } else {
            let eps = LatentTensor { values: seeded_noise(z0.values.shape(), seed), space: z0.space };
            noise_latent(&z0, timestep, &eps, schedule)?
        };
        parts.push(z.values);
    }
    Ok(Tensor::stack(&parts.iter().collect::<Vec<_>>()))
}

/// Encodes `image`, noises it to `config.timestep` and returns the requested
/// feature maps of one frozen denoiser pass under `condition`.
pub fn extract_features<S: Scalar>(
    backend: &dyn Backend<S>,
    schedule: &NoiseSchedule,
    image: &Frame,
    condition: &ConditionEmbedding<S>,
    config: &ExtractionConfig,
) -> Result<FeatureBundle<S>> {
    let d = backend.descriptor();
    d.validate_taps(&config.taps)?;
    let z = prepare_latents(backend, schedule, &[image], config.timestep, &[config.noise_seed])?;
    let z = LatentTensor { values: z.index0(0), space: backend.encode(image)?.space };
    backend.denoise(&z, config.timestep, &condition.tokens, &config.taps)
}

/// Read-only set of backends, populated once at startup.
pub struct BackendRegistry<S: Scalar> {
    backends: Vec<Arc<dyn Backend<S>>>,
}

impl<S: Scalar> Default for BackendRegistry<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> BackendRegistry<S> {
    pub fn new() -> Self {
        Self { backends: Vec::new() }
    }

    pub fn register(&mut self, backend: Arc<dyn Backend<S>>) -> Result<()> {
        let id = &backend.descriptor().backend_id;
        if self.backends.iter().any(|b| &b.descriptor().backend_id == id) {
            return Err(Error::Config(format!("backend `{id}` registered twice")));
        }
        self.backends.push(backend);
        Ok(())
    }

    pub fn get(&self, backend_id: &str) -> Result<Arc<dyn Backend<S>>> {
        self.backends
            .iter()
            .find(|b| b.descriptor().backend_id == backend_id)
            .cloned()
            .ok_or_else(|| Error::Lookup { kind: "backend", name: backend_id.to_string() })
    }

    pub fn list_tap_points(&self, backend_id: &str) -> Result<Vec<String>> {
        Ok(self.get(backend_id)?.descriptor().tap_points.clone())
    }
}

/// Tap points of a built-in backend, without instantiating its weights.
pub fn list_tap_points(backend_id: &str) -> Result<Vec<String>> {
    match backend_id {
        TOY_BACKEND_ID => Ok(ToyUNetConfig::default().descriptor().tap_points),
        other => Err(Error::Lookup { kind: "backend", name: other.to_string() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_tap_points_are_stable() {
        let a = list_tap_points(TOY_BACKEND_ID).unwrap();
        assert_eq!(a, vec!["down_1", "down_2", "down_3", "mid", "up_0", "up_1", "up_2"]);
        assert_eq!(a, list_tap_points(TOY_BACKEND_ID).unwrap());
        assert!(matches!(list_tap_points("sd15"), Err(Error::Lookup { .. })));
    }

    #[test]
    fn extraction_defaults() {
        let c = ExtractionConfig::default();
        assert_eq!(c.timestep, 0);
        assert_eq!(c.taps, vec!["down_1", "down_2", "down_3", "mid"]);
    }
}
