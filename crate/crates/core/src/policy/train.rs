use orca_tape::{Adam, Gradients, Graph, Module, Param, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_graph, Mlp, PolicyConfig};
use crate::compression::{BatchStats, Compression};
use crate::conditioner::PromptBank;
use crate::envkit::DemoDataset;
use crate::error::contract;
use crate::pipeline::{FrameCache, FrameInput, Pipeline};
use crate::{Error, Frame, Result};

/// Parameter groups reported by [`StepReport::grad_norms`].
pub const GRAD_GROUPS: [&str; 4] = ["task_tokens", "projector", "compression", "policy"];

/// The trainable parts of a run: prompt bank (learned variants only),
/// compression heads and policy.
#[derive(Debug, Clone)]
pub struct Agent<S> {
    pub bank: Option<PromptBank<S>>,
    pub compression: Compression<S>,
    pub policy: Mlp<S>,
    pub config: PolicyConfig,
    pub proprio_dim: usize,
}

impl<S: Scalar> Agent<S> {
    /// Initializes bank, compression and policy, in that order, from `rng`.
    pub fn new<R: Rng>(rng: &mut R, pipeline: &Pipeline<S>, config: &PolicyConfig, proprio_dim: usize) -> Result<Self> {
        config.validate()?;
        let bank = pipeline.new_bank(rng)?;
        let compression = pipeline.new_compression(rng)?;
        let proprio = if config.use_proprio { proprio_dim } else { 0 };
        let d_in = pipeline.fused_len() * config.obs_stack + proprio;
        let policy = Mlp::new(rng, d_in, &config.hidden_sizes, config.action_dim);
        Ok(Self { bank, compression, policy, config: config.clone(), proprio_dim })
    }

    /// Actions `[N, A]` for `inputs` holding `N · obs_stack` frames, sample
    /// major and oldest first. `proprio` is `[N, P]` when the policy uses it.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, S>,
        pipeline: &'a Pipeline<S>,
        inputs: &[FrameInput<'_, S>],
        proprio: Option<Tensor<S>>,
        noise_seeds: &[u64],
        train: bool,
    ) -> Result<(Var, Vec<(String, BatchStats)>)> {
        let k = self.config.obs_stack;
        contract!(inputs.len() % k == 0, "{} frames do not split into stacks of {k}", inputs.len());
        let n = inputs.len() / k;
        let (x, stats) = pipeline.features_graph(g, self.bank.as_ref(), &self.compression, inputs, noise_seeds, train)?;
        let f = g.shape(x)[1];
        let mut x = if k > 1 { g.reshape(x, &[n, k * f]) } else { x };
        match (proprio, self.config.use_proprio) {
            (Some(p), true) => {
                contract!(p.shape() == [n, self.proprio_dim], "proprio batch {:?}, expected [{n}, {}]", p.shape(), self.proprio_dim);
                let pv = g.constant(p);
                x = g.concat(&[x, pv], 1);
            }
            (None, false) => {}
            _ => return Err(Error::Contract("proprioception must be given exactly when use_proprio is set".into())),
        }
        contract!(g.shape(x)[1] == self.policy.d_in(), "policy input width {}, expected {}", g.shape(x)[1], self.policy.d_in());
        Ok((self.policy.forward(g, x), stats))
    }

    pub fn absorb(&mut self, stats: &[(String, BatchStats)]) {
        self.compression.absorb(stats);
    }

    /// Gradient norm per entry of [`GRAD_GROUPS`].
    pub fn grad_norms(&self, grads: &Gradients<S>) -> Vec<(String, f64)> {
        let norm = |ps: Vec<&Param<S>>| ps.iter().map(|p| grads.param_norm(p).as_f64().powi(2)).sum::<f64>().sqrt();
        let (tt, pj) = match &self.bank {
            Some(b) => (norm(vec![&b.task_tokens]), norm(vec![&b.proj_weight, &b.proj_bias])),
            None => (0.0, 0.0),
        };
        let groups = [tt, pj, norm(self.compression.params()), norm(self.policy.params())];
        GRAD_GROUPS.iter().zip(groups).map(|(n, v)| (n.to_string(), v)).collect()
    }
}

impl<S: Scalar> Module<S> for Agent<S> {
    fn params(&self) -> Vec<&Param<S>> {
        let mut v = self.bank.as_ref().map(Module::params).unwrap_or_default();
        v.extend(self.compression.params());
        v.extend(self.policy.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = self.bank.as_mut().map(Module::params_mut).unwrap_or_default();
        v.extend(self.compression.params_mut());
        v.extend(self.policy.params_mut());
        v
    }
}

/// Everything that changes during training. Frozen modules are not members.
#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub agent: Agent<S>,
    pub adam: Adam<S>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    /// One entry per optimizer step.
    pub losses: Vec<f64>,
}

/// One `(observation, action)` pair; `frames` index the trainer's flat
/// frame list.
#[derive(Debug, Clone)]
pub struct Sample<S> {
    pub frames: Vec<usize>,
    pub proprio: Vec<S>,
    pub action: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norms: Vec<(String, f64)>,
}

/// Step-level driver of behavior cloning over a demonstration set.
pub struct Trainer<'p, S: Scalar> {
    pipeline: &'p Pipeline<S>,
    frames: Vec<&'p Frame>,
    cache: Vec<Option<FrameCache<S>>>,
    samples: Vec<Sample<S>>,
    state: TrainState<S>,
    rng: ChaCha8Rng,
}

impl<'p, S: Scalar> Trainer<'p, S> {
    pub fn new(dataset: &'p DemoDataset, pipeline: &'p Pipeline<S>, config: &PolicyConfig, seed: u64) -> Result<Self> {
        contract!(dataset.num_steps() > 0, "empty demonstration set");
        let k = config.obs_stack;
        let mut frames = Vec::new();
        let mut samples = Vec::new();
        for ep in &dataset.episodes {
            let base = frames.len();
            frames.extend(ep.observations.iter().take(ep.len()));
            for t in 0..ep.len() {
                let a = &ep.actions[t];
                contract!(a.len() == config.action_dim, "demo action has {} entries, policy {}", a.len(), config.action_dim);
                samples.push(Sample {
                    frames: (0..k).map(|j| base + t.saturating_sub(k - 1 - j)).collect(),
                    proprio: ep.proprios[t].iter().map(|&v| S::c(f64::from(v))).collect(),
                    action: a.iter().map(|&v| S::c(f64::from(v))).collect(),
                });
            }
        }
        let proprio_dim = samples[0].proprio.len();
        Self::from_parts(pipeline, frames, samples, config, proprio_dim, seed)
    }

    /// Trainer over explicit samples, for fixtures that are not episodes.
    pub fn from_parts(
        pipeline: &'p Pipeline<S>,
        frames: Vec<&'p Frame>,
        samples: Vec<Sample<S>>,
        config: &PolicyConfig,
        proprio_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        contract!(!samples.is_empty(), "no training samples");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = Agent::new(&mut rng, pipeline, config, proprio_dim)?;
        let cache = pipeline.precompute(&frames)?;
        let state = TrainState { agent, adam: Adam::new(config.learning_rate), epoch: 0, seed, losses: Vec::new() };
        Ok(Self { pipeline, frames, cache, samples, state, rng })
    }

    pub fn state(&self) -> &TrainState<S> {
        &self.state
    }

    pub fn into_state(self) -> TrainState<S> {
        self.state
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// One optimizer step on the given samples.
    pub fn step(&mut self, batch: &[usize]) -> Result<StepReport> {
        contract!(!batch.is_empty(), "empty batch");
        let cfg = &self.state.agent.config;
        let k = cfg.obs_stack;
        let seeds: Vec<u64> = (0..batch.len() * k).map(|_| self.rng.random()).collect();
        let step_no = self.state.losses.len();
        let (loss, grads, stats) = {
            let agent = &self.state.agent;
            let mut inputs = Vec::with_capacity(batch.len() * k);
            for &i in batch {
                for &f in &self.samples[i].frames {
                    inputs.push(FrameInput { frame: self.frames[f], cache: self.cache[f].as_ref() });
                }
            }
            let proprio = cfg.use_proprio.then(|| {
                let p: Vec<S> = batch.iter().flat_map(|&i| self.samples[i].proprio.iter().copied()).collect();
                Tensor::from_vec(&[batch.len(), agent.proprio_dim], p)
            });
            let target: Vec<S> = batch.iter().flat_map(|&i| self.samples[i].action.iter().copied()).collect();
            let target = Tensor::from_vec(&[batch.len(), cfg.action_dim], target);
            let mut g = Graph::new();
            let (pred, stats) = agent.forward(&mut g, self.pipeline, &inputs, proprio, &seeds, true)?;
            let l = loss_graph(&mut g, pred, &target, cfg.loss);
            let loss = g.value(l).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence { step: step_no, detail: format!("loss {loss} at epoch {}", self.state.epoch) });
            }
            (loss, g.backward(l), stats)
        };
        let grad_norms = self.state.agent.grad_norms(&grads);
        self.state.adam.step(&mut self.state.agent.params_mut(), &grads);
        self.state.agent.absorb(&stats);
        self.state.losses.push(loss);
        Ok(StepReport { loss, grad_norms })
    }

    /// One shuffled pass over all samples; returns the mean step loss.
    pub fn epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let bs = self.state.agent.config.batch_size;
        let mut total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(bs) {
            total += self.step(batch)?.loss;
            steps += 1;
        }
        self.state.epoch += 1;
        Ok(total / steps as f64)
    }
}

/// Trains for `config.epochs` epochs, calling `on_checkpoint` after every
/// `every`-th epoch and after none other.
pub fn train<S: Scalar>(
    dataset: &DemoDataset,
    pipeline: &Pipeline<S>,
    config: &PolicyConfig,
    seed: u64,
    every: usize,
    mut on_checkpoint: impl FnMut(&TrainState<S>) -> Result<()>,
) -> Result<TrainState<S>> {
    contract!(every > 0, "checkpoint interval must be positive");
    let mut trainer = Trainer::new(dataset, pipeline, config, seed)?;
    for _ in 0..config.epochs {
        trainer.epoch()?;
        if trainer.state.epoch % every == 0 {
            on_checkpoint(&trainer.state)?;
        }
    }
    Ok(trainer.into_state())
}
