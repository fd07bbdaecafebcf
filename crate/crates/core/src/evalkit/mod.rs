//! Rollout evaluation, run records, seed aggregation and ablation grids.

mod ablation;
mod experiment;
mod results;

use orca_tape::{Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envkit::{make_env, Env, EnvId, MetricKind, Observation};
use crate::error::contract;
use crate::pipeline::{FrameInput, Pipeline};
use crate::policy::Agent;
use crate::Result;
pub use ablation::{run_ablation, AblationGrid, AblationJob, AblationReport, Axis, Failure, GridValue};
pub use experiment::{default_runner, eval_seed, evaluate_agent, run_experiment, Experiment};
pub use results::{aggregate, summarize, CellStats, RunResult, Summary, SummaryRow};

pub const DEFAULT_EVAL_EPISODES: usize = 25;

/// Anything that picks actions for a batch of live episodes.
pub trait Controller {
    /// `envs[i]` is the live environment of `histories[i]`, which holds
    /// every observation of that episode so far. Learned controllers read
    /// only the histories; the environment is there for privileged
    /// baselines such as the scripted expert.
    fn act(&mut self, envs: &[&dyn Env], histories: &[&[Observation]]) -> Result<Vec<Vec<f64>>>;
}

/// The scripted expert as a controller.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&mut self, envs: &[&dyn Env], _: &[&[Observation]]) -> Result<Vec<Vec<f64>>> {
        Ok(envs.iter().map(|e| e.expert_action()).collect())
    }
}

/// Greedy actions of a trained agent, one batched pass per step.
pub struct PolicyController<'p, S: Scalar> {
    pipeline: &'p Pipeline<S>,
    agent: &'p Agent<S>,
    rng: ChaCha8Rng,
}

impl<'p, S: Scalar> PolicyController<'p, S> {
    /// `seed` drives the extraction noise at timesteps above zero.
    pub fn new(pipeline: &'p Pipeline<S>, agent: &'p Agent<S>, seed: u64) -> Self {
        Self { pipeline, agent, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl<S: Scalar> Controller for PolicyController<'_, S> {
    fn act(&mut self, _: &[&dyn Env], histories: &[&[Observation]]) -> Result<Vec<Vec<f64>>> {
        let k = self.agent.config.obs_stack;
        let mut inputs = Vec::with_capacity(histories.len() * k);
        for h in histories {
            contract!(!h.is_empty(), "empty observation history");
            let last = h.len() - 1;
            for j in 0..k {
                inputs.push(FrameInput { frame: &h[last.saturating_sub(k - 1 - j)].frame, cache: None });
            }
        }
        let proprio = self.agent.config.use_proprio.then(|| {
            let p: Vec<S> = histories.iter().flat_map(|h| h[h.len() - 1].proprio.iter().map(|&v| S::c(v))).collect();
            Tensor::from_vec(&[histories.len(), self.agent.proprio_dim], p)
        });
        let seeds: Vec<u64> = (0..inputs.len()).map(|_| self.rng.random()).collect();
        let mut g = Graph::new();
        let (y, _) = self.agent.forward(&mut g, self.pipeline, &inputs, proprio, &seeds, false)?;
        let a = self.agent.config.action_dim;
        Ok(g.value(y).data().chunks(a).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub metric: f64,
    pub metric_kind: MetricKind,
    pub episode_metrics: Vec<f64>,
}

/// Runs `n_episodes` rollouts in lockstep and averages the per-episode
/// metric (normalized score or success). Episode seeds come from `seed`.
pub fn evaluate_policy(env_id: EnvId, controller: &mut dyn Controller, n_episodes: usize, seed: u64) -> Result<EvalOutcome> {
    contract!(n_episodes > 0, "at least one evaluation episode required");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut envs: Vec<Box<dyn Env>> = (0..n_episodes).map(|_| make_env(env_id)).collect();
    let mut histories: Vec<Vec<Observation>> = envs.iter_mut().map(|e| vec![e.reset(rng.random())]).collect();
    let spec = envs[0].spec().clone();
    let mut done = vec![false; n_episodes];
    loop {
        let active: Vec<usize> = (0..n_episodes).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let actions = {
            let env_refs: Vec<&dyn Env> = active.iter().map(|&i| envs[i].as_ref()).collect();
            let hist: Vec<&[Observation]> = active.iter().map(|&i| histories[i].as_slice()).collect();
            controller.act(&env_refs, &hist)?
        };
        contract!(actions.len() == active.len(), "controller returned {} actions for {} episodes", actions.len(), active.len());
        for (a, &i) in actions.iter().zip(&active) {
            contract!(a.len() == spec.action_dim, "action has {} entries, {env_id} expects {}", a.len(), spec.action_dim);
            let tr = envs[i].step(a)?;
            histories[i].push(tr.observation);
            done[i] = tr.done;
        }
    }
    let episode_metrics: Vec<f64> = envs.iter().map(|e| e.episode_metric()).collect();
    let metric = episode_metrics.iter().sum::<f64>() / n_episodes as f64;
    Ok(EvalOutcome { metric, metric_kind: spec.metric_kind, episode_metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_scores_high() {
        let out = evaluate_policy(EnvId::PointReach, &mut ExpertController, 10, 3).unwrap();
        assert!(out.metric >= 0.95, "{}", out.metric);
        assert_eq!(out.episode_metrics.len(), 10);
        let again = evaluate_policy(EnvId::PointReach, &mut ExpertController, 10, 3).unwrap();
        assert_eq!(out, again);
    }

    struct Wrong;
    impl Controller for Wrong {
        fn act(&mut self, envs: &[&dyn Env], _: &[&[Observation]]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![0.0; 3]; envs.len()])
        }
    }

    #[test]
    fn action_dimension_mismatch_is_contract_error() {
        assert!(matches!(evaluate_policy(EnvId::PressPad, &mut Wrong, 2, 0), Err(crate::Error::Contract(_))));
    }
}
