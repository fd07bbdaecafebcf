use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{region, Canvas, Mask};
use super::{clip_action, reach_score, Env, EnvId, EnvSpec, MetricKind, Observation, Transition, IMAGE_SIZE, STEP_SCALE};
use crate::{Error, Result};

const L1: f64 = 0.5;
const L2: f64 = 0.4;
const LINK_R: f64 = 0.035;
const GOAL_R: f64 = 0.08;
const ARM_RGB: [f32; 3] = [0.95, 0.6, 0.2];
const TIP_RGB: [f32; 3] = [0.95, 0.85, 0.2];
const GOAL_RGB: [f32; 3] = [0.9, 0.15, 0.15];
const SUCCESS_DIST: f64 = 0.05;

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Planar arm with two revolute joints at the arena centre, driven by joint
/// velocities.
#[derive(Debug, Clone)]
pub struct TwoLinkReach {
    spec: EnvSpec,
    q: [f64; 2],
    dq: [f64; 2],
    goal: [f64; 2],
    initial_dist: f64,
    t: usize,
}

impl Default for TwoLinkReach {
    fn default() -> Self {
        Self::new()
    }
}

impl TwoLinkReach {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                env_id: EnvId::TwoLinkReach,
                image_size: (IMAGE_SIZE, IMAGE_SIZE, 3),
                action_dim: 2,
                episode_len: 40,
                metric_kind: MetricKind::NormalizedScore,
                proprio_dim: 6,
            },
            q: [0.0; 2],
            dq: [0.0; 2],
            goal: [0.5, 0.0],
            initial_dist: 0.4,
            t: 0,
        }
    }

    fn elbow(&self) -> (f64, f64) {
        (L1 * self.q[0].cos(), L1 * self.q[0].sin())
    }

    pub fn tip(&self) -> (f64, f64) {
        let (ex, ey) = self.elbow();
        let a = self.q[0] + self.q[1];
        (ex + L2 * a.cos(), ey + L2 * a.sin())
    }

    fn dist(&self) -> f64 {
        let (x, y) = self.tip();
        (x - self.goal[0]).hypot(y - self.goal[1])
    }

    /// Joint angles reaching `goal`, choosing the elbow branch nearest the
    /// current configuration.
    fn inverse_kinematics(&self) -> [f64; 2] {
        let (x, y) = (self.goal[0], self.goal[1]);
        let c2 = ((x * x + y * y - L1 * L1 - L2 * L2) / (2.0 * L1 * L2)).clamp(-1.0, 1.0);
        let cost = |q: [f64; 2]| wrap(q[0] - self.q[0]).abs() + wrap(q[1] - self.q[1]).abs();
        [1.0, -1.0]
            .iter()
            .map(|s| {
                let q2 = s * c2.acos();
                let q1 = y.atan2(x) - (L2 * q2.sin()).atan2(L1 + L2 * q2.cos());
                [q1, q2]
            })
            .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
            .expect("two branches")
    }

    fn draw(&self) -> (Canvas, Vec<(String, Mask)>) {
        let mut c = Canvas::floor(IMAGE_SIZE);
        let goal = c.disk(self.goal[0], self.goal[1], GOAL_R, GOAL_RGB);
        let e = self.elbow();
        let tip = self.tip();
        let l1 = c.capsule((0.0, 0.0), e, LINK_R, ARM_RGB);
        let l2 = c.capsule(e, tip, LINK_R, ARM_RGB);
        let t = c.disk(tip.0, tip.1, 0.05, TIP_RGB);
        let mut arm = l1;
        for ((a, b), t) in arm.bits.iter_mut().zip(&l2.bits).zip(&t.bits) {
            *a |= *b || *t;
        }
        (c, vec![("agent".into(), arm), ("goal".into(), goal)])
    }
}

impl Env for TwoLinkReach {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            self.q = [rng.random_range(-PI..PI), rng.random_range(-PI..PI)];
            let r = rng.random_range(0.2..0.85);
            let th = rng.random_range(-PI..PI);
            self.goal = [r * th.cos(), r * th.sin()];
            if self.dist() >= 0.4 {
                break;
            }
        }
        self.dq = [0.0; 2];
        self.initial_dist = self.dist();
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if self.t >= self.spec.episode_len {
            return Err(Error::Protocol("step after episode end".into()));
        }
        let (a, clipped) = clip_action(action, 2)?;
        for i in 0..2 {
            self.dq[i] = a[i];
            self.q[i] += STEP_SCALE * a[i];
            if self.q[i].abs() > PI {
                self.q[i] = wrap(self.q[i]);
            }
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
            proprio: vec![self.q[0].cos(), self.q[0].sin(), self.q[1].cos(), self.q[1].sin(), self.dq[0], self.dq[1]],
        }
    }

    fn state(&self) -> Vec<f64> {
        vec![self.q[0], self.q[1], self.goal[0], self.goal[1], self.dq[0], self.dq[1]]
    }

    fn set_state(&mut self, s: &[f64]) -> Result<()> {
        if s.len() != 6 {
            return Err(Error::Contract(format!("two_link_reach state has 6 entries, got {}", s.len())));
        }
        self.q = [s[0], s[1]];
        self.goal = [s[2], s[3]];
        self.dq = [s[4], s[5]];
        Ok(())
    }

    fn expert_action(&self) -> Vec<f64> {
        let target = self.inverse_kinematics();
        (0..2).map(|i| (5.0 * wrap(target[i] - self.q[i])).clamp(-1.0, 1.0)).collect()
    }

    fn masks(&self) -> Vec<(String, Mask)> {
        self.draw().1
    }

    fn describe(&self) -> String {
        let (x, y) = self.tip();
        format!("arm {} target {}", region(x, y), region(self.goal[0], self.goal[1]))
    }

    fn episode_metric(&self) -> f64 {
        reach_score(self.initial_dist, self.dist())
    }

    fn is_success(&self) -> bool {
        self.dist() < SUCCESS_DIST
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_kinematics_reaches_goal() {
        let mut env = TwoLinkReach::new();
        for seed in 0..20 {
            env.reset(seed);
            env.q = env.inverse_kinematics();
            assert!(env.dist() < 1e-9, "seed {seed}: {}", env.dist());
        }
    }
}
