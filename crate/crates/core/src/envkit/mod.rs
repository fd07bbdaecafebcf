//! Synthetic image-based control tasks with scripted experts, and the
//! demonstration dataset format.

mod dataset;
mod point;
mod press_pad;
mod render;
mod two_link;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Frame, Result};

pub use dataset::{load_dataset, save_dataset, DemoDataset, Episode};
pub use point::PointReach;
pub use press_pad::PressPad;
pub use render::{region, Canvas, Mask};
pub use two_link::TwoLinkReach;

pub const IMAGE_SIZE: usize = 64;
/// Positions advance by this factor times the (clipped) action per step.
pub const STEP_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    PointReach,
    TwoLinkReach,
    PressPad,
}

impl EnvId {
    pub const ALL: [EnvId; 3] = [EnvId::PointReach, EnvId::TwoLinkReach, EnvId::PressPad];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::PointReach => "point_reach",
            EnvId::TwoLinkReach => "two_link_reach",
            EnvId::PressPad => "press_pad",
        }
    }

    /// Demonstrations per task: five for reaching, two for pressing.
    pub fn default_demos(self) -> usize {
        match self {
            EnvId::PressPad => 2,
            _ => 5,
        }
    }

    /// Proprioception is fed to the policy only on the manipulation task.
    pub fn default_use_proprio(self) -> bool {
        matches!(self, EnvId::PressPad)
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Lookup { kind: "environment", name: s.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    NormalizedScore,
    SuccessRate,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::NormalizedScore => "normalized_score",
            MetricKind::SuccessRate => "success_rate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvSpec {
    pub env_id: EnvId,
    /// `(height, width, channels)`
    pub image_size: (usize, usize, usize),
    pub action_dim: usize,
    pub episode_len: usize,
    pub metric_kind: MetricKind,
    pub proprio_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame: Frame,
    pub proprio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// The submitted action left `[-1, 1]` and was clipped.
    pub clipped: bool,
}

/// Reset/step/render contract shared by the toy tasks; a real simulator can
/// be wired in behind the same trait.
pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;

    /// Samples an initial configuration from `seed`.
    fn reset(&mut self, seed: u64) -> Observation;

    fn step(&mut self, action: &[f64]) -> Result<Transition>;

    fn observe(&self) -> Observation;

    /// Full simulator state; the frame is a pure function of it.
    fn state(&self) -> Vec<f64>;

    fn set_state(&mut self, state: &[f64]) -> Result<()>;

    /// Scripted expert action for the current state.
    fn expert_action(&self) -> Vec<f64>;

    /// Per-object pixel masks of the current frame.
    fn masks(&self) -> Vec<(String, Mask)>;

    /// Short words describing the scene layout.
    fn describe(&self) -> String;

    /// Metric of the episode so far: normalized score or 0/1 success.
    fn episode_metric(&self) -> f64;

    fn is_success(&self) -> bool;
}

pub fn make_env(env_id: EnvId) -> Box<dyn Env> {
    match env_id {
        EnvId::PointReach => Box::new(PointReach::new()),
        EnvId::TwoLinkReach => Box::new(TwoLinkReach::new()),
        EnvId::PressPad => Box::new(PressPad::new()),
    }
}

pub(crate) fn clip_action(action: &[f64], dim: usize) -> Result<(Vec<f64>, bool)> {
    if action.len() != dim {
        return Err(Error::Contract(format!("action of length {}, expected {dim}", action.len())));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Contract("non-finite action".into()));
    }
    let clipped = action.iter().any(|a| a.abs() > 1.0);
    Ok((action.iter().map(|a| a.clamp(-1.0, 1.0)).collect(), clipped))
}

/// Reaching score: `max(0, 1 − final / initial)` distance ratio.
pub fn reach_score(initial: f64, last: f64) -> f64 {
    if initial <= 0.0 {
        return 1.0;
    }
    (1.0 - last / initial).clamp(0.0, 1.0)
}

/// Quality bar a scripted episode must meet to be stored.
pub const QUALITY_BAR: f64 = 0.95;
pub const EXPERT_ID: &str = "scripted_v1";

/// Runs the expert from one seed to the end of the episode.
pub fn rollout_expert(env: &mut dyn Env, seed: u64) -> Result<Episode> {
    let mut obs = env.reset(seed);
    let mut ep = Episode::default();
    loop {
        let a = env.expert_action();
        ep.observations.push(obs.frame.clone());
        ep.proprios.push(obs.proprio.iter().map(|&v| v as f32).collect());
        ep.states.push(env.state().iter().map(|&v| v as f32).collect());
        ep.actions.push(a.iter().map(|&v| v as f32).collect());
        let tr = env.step(&a)?;
        ep.rewards.push(tr.reward as f32);
        ep.clipped |= tr.clipped;
        obs = tr.observation;
        if tr.done {
            break;
        }
    }
    ep.success = env.is_success();
    ep.metric = env.episode_metric();
    ep.seed = seed;
    Ok(ep)
}

fn passes(env: &dyn Env, ep: &Episode) -> bool {
    match env.spec().metric_kind {
        MetricKind::NormalizedScore => ep.metric >= QUALITY_BAR,
        MetricKind::SuccessRate => ep.success,
    }
}

/// Collects `n_episodes` expert demonstrations that meet the quality bar,
/// drawing fresh episode seeds from `seed`; at most `20 · n` attempts.
pub fn generate_demos(env_id: EnvId, n_episodes: usize, seed: u64) -> Result<DemoDataset> {
    if n_episodes == 0 {
        return Err(Error::Generation("at least one episode is required".into()));
    }
    let mut env = make_env(env_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = 20 * n_episodes;
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut rejected = Vec::new();
    for _ in 0..budget {
        if episodes.len() == n_episodes {
            break;
        }
        let ep_seed: u64 = rng.random();
        let ep = rollout_expert(env.as_mut(), ep_seed)?;
        if passes(env.as_ref(), &ep) {
            episodes.push(ep);
        } else {
            rejected.push(format!("seed {ep_seed}: metric {:.3}", ep.metric));
        }
    }
    if episodes.len() < n_episodes {
        return Err(Error::Generation(format!(
            "{env_id}: only {} of {n_episodes} episodes met the quality bar in {budget} attempts (rejected: {})",
            episodes.len(),
            rejected.join("; ")
        )));
    }
    Ok(DemoDataset { env_id, episodes, generator_seed: seed, expert_id: EXPERT_ID.to_string(), rejected: rejected.len() })
}
