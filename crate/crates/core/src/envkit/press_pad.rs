use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{region, Canvas, Mask};
use super::{clip_action, Env, EnvId, EnvSpec, MetricKind, Observation, Transition, IMAGE_SIZE, STEP_SCALE};
use crate::{Error, Result};

/// Lowest reachable gripper height, the top of the pad.
const FLOOR: f64 = -0.55;
const PAD_HW: f64 = 0.12;
const ALIGN_TOL: f64 = 0.04;
/// Horizontal slack under which a press at the floor counts.
const PRESS_TOL: f64 = 0.06;
/// The gripper never starts above the pad.
const MIN_START_OFFSET: f64 = 0.3;
const BOX_RGB: [f32; 3] = [0.95, 0.85, 0.2];
const PAD_RGB: [f32; 3] = [0.9, 0.15, 0.15];
const PRESSED_RGB: [f32; 3] = [0.45, 0.08, 0.08];
const GRIPPER_RGB: [f32; 3] = [0.85, 0.85, 0.85];

/// Gripper that must come down on a pad. Lowering it to the floor while
/// horizontally over the pad presses the pad and ends the episode. Sliding
/// along the floor onto the pad does not count.
#[derive(Debug, Clone)]
pub struct PressPad {
    spec: EnvSpec,
    gripper: [f64; 2],
    vel: [f64; 2],
    pad_x: f64,
    pressed: bool,
    t: usize,
}

impl Default for PressPad {
    fn default() -> Self {
        Self::new()
    }
}

impl PressPad {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                env_id: EnvId::PressPad,
                image_size: (IMAGE_SIZE, IMAGE_SIZE, 3),
                action_dim: 2,
                episode_len: 40,
                metric_kind: MetricKind::SuccessRate,
                proprio_dim: 4,
            },
            gripper: [0.0, 0.5],
            vel: [0.0; 2],
            pad_x: 0.0,
            pressed: false,
            t: 0,
        }
    }

    fn aligned(&self) -> bool {
        (self.gripper[0] - self.pad_x).abs() <= PRESS_TOL
    }

    fn draw(&self) -> (Canvas, Vec<(String, Mask)>) {
        let mut c = Canvas::floor(IMAGE_SIZE);
        let body = c.rect(self.pad_x, -0.8, 0.22, 0.2, BOX_RGB);
        let pad_rgb = if self.pressed { PRESSED_RGB } else { PAD_RGB };
        let pad_y = if self.pressed { -0.6 + 0.02 } else { -0.6 + 0.04 };
        let pad = c.rect(self.pad_x, pad_y, PAD_HW, 0.04, pad_rgb);
        let (x, y) = (self.gripper[0], self.gripper[1]);
        let arm = c.rect(x, (y + 1.2) / 2.0 + 0.05, 0.025, (1.0 - y) / 2.0, GRIPPER_RGB);
        let head = c.rect(x, y + 0.05, 0.08, 0.05, GRIPPER_RGB);
        let mut gripper = arm;
        for (a, b) in gripper.bits.iter_mut().zip(&head.bits) {
            *a |= *b;
        }
        let mut target = body;
        for (a, b) in target.bits.iter_mut().zip(&pad.bits) {
            *a |= *b;
        }
        (c, vec![("agent".into(), gripper), ("goal".into(), target)])
    }
}

impl Env for PressPad {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pad_x = rng.random_range(-0.7..0.7);
        loop {
            self.gripper = [rng.random_range(-0.8..0.8), rng.random_range(0.2..0.8)];
            if (self.gripper[0] - self.pad_x).abs() >= MIN_START_OFFSET {
                break;
            }
        }
        self.vel = [0.0; 2];
        self.pressed = false;
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition> {
        if self.t >= self.spec.episode_len || self.pressed {
            return Err(Error::Protocol("step after episode end".into()));
        }
        let (a, clipped) = clip_action(action, 2)?;
        let prev = self.gripper;
        self.gripper[0] = (self.gripper[0] + STEP_SCALE * a[0]).clamp(-1.0, 1.0);
        self.gripper[1] = (self.gripper[1] + STEP_SCALE * a[1]).clamp(FLOOR, 1.0);
        for i in 0..2 {
            self.vel[i] = (self.gripper[i] - prev[i]) / STEP_SCALE;
        }
        self.t += 1;
        let landed = prev[1] > FLOOR + 1e-9 && self.gripper[1] <= FLOOR + 1e-9;
        let hit = landed && a[1] < 0.0 && self.aligned();
        if hit {
            self.pressed = true;
        }
        Ok(Transition {
            observation: self.observe(),
            reward: if hit { 1.0 } else { 0.0 },
            done: self.pressed || self.t >= self.spec.episode_len,
            success: self.pressed,
            clipped,
        })
    }

    fn observe(&self) -> Observation {
        Observation {
            frame: self.draw().0.finish(),
            proprio: vec![self.gripper[0], self.gripper[1], self.vel[0], self.vel[1]],
        }
    }

    fn state(&self) -> Vec<f64> {
        vec![self.gripper[0], self.gripper[1], self.pad_x, f64::from(u8::from(self.pressed)), self.vel[0], self.vel[1]]
    }

    fn set_state(&mut self, s: &[f64]) -> Result<()> {
        if s.len() != 6 {
            return Err(Error::Contract(format!("press_pad state has 6 entries, got {}", s.len())));
        }
        self.gripper = [s[0], s[1]];
        self.pad_x = s[2];
        self.pressed = s[3] > 0.5;
        self.vel = [s[4], s[5]];
        Ok(())
    }

    fn expert_action(&self) -> Vec<f64> {
        let dx = self.pad_x - self.gripper[0];
        let ax = (5.0 * dx).clamp(-1.0, 1.0);
        let ay = if dx.abs() <= ALIGN_TOL { -1.0 } else { 0.0 };
        vec![ax, ay]
    }

    fn masks(&self) -> Vec<(String, Mask)> {
        self.draw().1
    }

    fn describe(&self) -> String {
        let state = if self.pressed { "pressed" } else { "raised" };
        format!("gripper {} pad {} {state}", region(self.gripper[0], self.gripper[1]), region(self.pad_x, -0.6))
    }

    fn episode_metric(&self) -> f64 {
        f64::from(u8::from(self.pressed))
    }

    fn is_success(&self) -> bool {
        self.pressed
    }
}
