//! Behavior-cloning head on fused state vectors, its loss and training.

mod checkpoint;
mod train;

use orca_tape::{Graph, Module, Param, Scalar, Tensor, Var};
use rand::Rng;

pub use crate::config::LossKind;
use crate::config::RunConfig;
use crate::error::contract;
use crate::nn::{Init, Linear};
use crate::{Error, Result};
pub use checkpoint::{load_agent, save_checkpoint, Checkpoint};
pub use train::{train, Agent, Sample, StepReport, TrainState, Trainer, GRAD_GROUPS};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub hidden_sizes: Vec<usize>,
    pub action_dim: usize,
    pub use_proprio: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Consecutive frames per observation, oldest first.
    pub obs_stack: usize,
}

impl PolicyConfig {
    pub fn new(action_dim: usize) -> Self {
        Self {
            hidden_sizes: vec![256, 256],
            action_dim,
            use_proprio: false,
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 32,
            loss: LossKind::Mse,
            obs_stack: 1,
        }
    }

    pub fn from_run(config: &RunConfig, action_dim: usize) -> Result<Self> {
        let p = &config.policy;
        let c = Self {
            hidden_sizes: p.hidden_sizes.clone(),
            action_dim,
            use_proprio: config.use_proprio(),
            learning_rate: p.lr,
            epochs: p.epochs,
            batch_size: p.batch_size,
            loss: p.loss.kind,
            obs_stack: p.obs.stack,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.action_dim == 0 {
            return bad("action_dim must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 || self.obs_stack == 0 {
            return bad("batch_size and obs_stack must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.hidden_sizes.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }
}

/// ReLU multilayer perceptron with a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp<S> {
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new<R: Rng>(rng: &mut R, d_in: usize, hidden: &[usize], d_out: usize) -> Self {
        let mut init = Init::new(rng, true);
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(d_out);
        let layers = dims.windows(2).enumerate().map(|(i, w)| Linear::new(&mut init, &format!("policy.fc{i}"), w[0], w[1])).collect();
        Self { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("at least one layer").d_out()
    }

    /// `x: [N, d_in]` to `[N, d_out]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }
}

impl<S: Scalar> Module<S> for Mlp<S> {
    fn params(&self) -> Vec<&Param<S>> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers.iter_mut().flat_map(Linear::params_mut).collect()
    }
}

/// Action for one fused state vector, with proprioception appended when the
/// policy uses it.
pub fn predict_action<S: Scalar>(policy: &Mlp<S>, state_vec: &[S], proprio: Option<&[S]>, config: &PolicyConfig) -> Result<Vec<S>> {
    contract!(
        proprio.is_some() == config.use_proprio,
        "proprioception must be given exactly when use_proprio is set"
    );
    let mut x = state_vec.to_vec();
    x.extend_from_slice(proprio.unwrap_or(&[]));
    contract!(x.len() == policy.d_in(), "policy input has length {}, expected {}", x.len(), policy.d_in());
    contract!(policy.d_out() == config.action_dim, "policy outputs {} actions, config says {}", policy.d_out(), config.action_dim);
    let mut g = Graph::new();
    let xv = g.constant(Tensor::from_vec(&[1, x.len()], x));
    let y = policy.forward(&mut g, xv);
    Ok(g.value(y).data().to_vec())
}

/// Squared error averaged over action dimensions (and over the batch when
/// several rows are concatenated).
pub fn bc_loss<S: Scalar>(pred: &[S], target: &[S]) -> Result<f64> {
    contract!(pred.len() == target.len(), "prediction has {} entries, target {}", pred.len(), target.len());
    contract!(!pred.is_empty(), "empty action");
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2)).sum();
    Ok(ss / pred.len() as f64)
}

pub fn loss_graph<S: Scalar>(g: &mut Graph<'_, S>, pred: Var, target: &Tensor<S>, kind: LossKind) -> Var {
    match kind {
        LossKind::Mse => g.mse(pred, target),
        LossKind::L1 => g.l1(pred, target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_examples() {
        assert_eq!(bc_loss(&[1.0f64, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(bc_loss(&[0.3f64, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert!(bc_loss(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn graph_loss_matches_plain() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, -1.0]));
        let t = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 0.0, 1.0]);
        let l = loss_graph(&mut g, p, &t, LossKind::Mse);
        let want = bc_loss(&[1.0, 0.0, 0.5, -1.0], t.data()).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_zero_action() {
        let mut mlp = Mlp::<f64>::new(&mut ChaCha8Rng::seed_from_u64(0), 5, &[4, 4], 2);
        for p in mlp.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut cfg = PolicyConfig::new(2);
        cfg.use_proprio = true;
        let a = predict_action(&mlp, &[1.0, 2.0, 3.0], Some(&[4.0, 5.0]), &cfg).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
        assert!(predict_action(&mlp, &[1.0, 2.0, 3.0], None, &cfg).is_err());
        assert!(predict_action(&mlp, &[1.0, 2.0], Some(&[4.0, 5.0]), &cfg).is_err());
    }
}
