use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{region, Canvas, Mask};
use super::{clip_action, reach_score, Env, EnvId, EnvSpec, MetricKind, Observation, Transition, IMAGE_SIZE, STEP_SCALE};
use crate::{Error, Result};

const AGENT_R: f64 = 0.08;
const GOAL_R: f64 = 0.1;
const AGENT_RGB: [f32; 3] = [0.95, 0.85, 0.2];
const GOAL_RGB: [f32; 3] = [0.9, 0.15, 0.15];
/// Distance under which the agent counts as on the goal.
const SUCCESS_DIST: f64 = 0.05;

/// Point mass steered by velocity commands toward a goal disk.
#[derive(Debug, Clone)]
pub struct PointReach {
    spec: EnvSpec,
    agent: [f64; 2],
    goal: [f64; 2],
    vel: [f64; 2],
    initial_dist: f64,
    t: usize,
}

impl Default for PointReach {
    fn default() -> Self {
        Self::new()
    }
}

impl PointReach {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                env_id: EnvId::PointReach,
                image_size: (IMAGE_SIZE, IMAGE_SIZE, 3),
                action_dim: 2,
                episode_len: 30,
                metric_kind: MetricKind::NormalizedScore,
                proprio_dim: 4,
            },
            agent: [0.0; 2],
            goal: [0.5; 2],
            vel: [0.0; 2],
            initial_dist: 0.5f64.hypot(0.5),
            t: 0,
        }
    }

    pub fn dist(&self) -> f64 {
        (self.agent[0] - self.goal[0]).hypot(self.agent[1] - self.goal[1])
    }

    fn draw(&self) -> (Canvas, Vec<(String, Mask)>) {
        let mut c = Canvas::floor(IMAGE_SIZE);
        let goal = c.disk(self.goal[0], self.goal[1], GOAL_R, GOAL_RGB);
        let agent = c.disk(self.agent[0], self.agent[1], AGENT_R, AGENT_RGB);
        (c, vec![("agent".into(), agent), ("goal".into(), goal)])
    }
}

impl Env for PointReach {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let mut p = || rng.random_range(-0.8..0.8);
            self.agent = [p(), p()];
            self.goal = [p(), p()];
            if self.dist() >= 0.4 {
                break;
            }
        }
        self.vel = [0.0; 2];
        self.initial_dist = self.dist();
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if self.t >= self.spec.episode_len {
            return Err(Error::Protocol("step after episode end".into()));
        }
        let (a, clipped) = clip_action(action, 2)?;
        let prev = self.agent;
        for i in 0..2 {
            self.agent[i] = (self.agent[i] + STEP_SCALE * a[i]).clamp(-1.0, 1.0);
            self.vel[i] = (self.agent[i] - prev[i]) / STEP_SCALE;
        }
        self.t += 1;
        Ok(Transition {
            observation: self.observe(),
            reward: -self.dist(),
            done: self.t >= self.spec.episode_len,
            success: self.is_success(),
            clipped,
        })
    }

    fn observe(&self) -> Observation {
        Observation {
            frame: self.draw().0.finish(),
            proprio: vec![self.agent[0], self.agent[1], self.vel[0], self.vel[1]],
        }
    }

    fn state(&self) -> Vec<f64> {
        vec![self.agent[0], self.agent[1], self.goal[0], self.goal[1], self.vel[0], self.vel[1]]
    }

    fn set_state(&mut self, s: &[f64]) -> Result<()> {
        if s.len() != 6 {
            return Err(Error::Contract(format!("point_reach state has 6 entries, got {}", s.len())));
        }
        self.agent = [s[0], s[1]];
        self.goal = [s[2], s[3]];
        self.vel = [s[4], s[5]];
        Ok(())
    }

    fn expert_action(&self) -> Vec<f64> {
        (0..2).map(|i| (5.0 * (self.goal[i] - self.agent[i])).clamp(-1.0, 1.0)).collect()
    }

    fn masks(&self) -> Vec<(String, Mask)> {
        self.draw().1
    }

    fn describe(&self) -> String {
        format!("agent {} target {}", region(self.agent[0], self.agent[1]), region(self.goal[0], self.goal[1]))
    }

    fn episode_metric(&self) -> f64 {
        reach_score(self.initial_dist, self.dist())
    }

    fn is_success(&self) -> bool {
        self.dist() < SUCCESS_DIST
    }
}
