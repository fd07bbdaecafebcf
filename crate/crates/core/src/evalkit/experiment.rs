use orca_tape::Scalar;

use super::{evaluate_policy, AblationJob, EvalOutcome, PolicyController, RunResult};
use crate::config::RunConfig;
use crate::envkit::{generate_demos, make_env, DemoDataset, EnvId};
use crate::pipeline::Pipeline;
use crate::policy::{train, Agent, PolicyConfig, TrainState};
use crate::{Error, Result};

/// Evaluation episodes are drawn from the run seed, shifted so they never
/// coincide with the demonstration episodes.
pub fn eval_seed(run_seed: u64) -> u64 {
    run_seed ^ 0x00e7_a15e_ed00_0000
}

pub fn evaluate_agent<S: Scalar>(pipeline: &Pipeline<S>, agent: &Agent<S>, env_id: EnvId, episodes: usize, seed: u64) -> Result<EvalOutcome> {
    let mut ctl = PolicyController::new(pipeline, agent, seed);
    evaluate_policy(env_id, &mut ctl, episodes, seed)
}

/// A finished run: its record and the final training state.
pub struct Experiment {
    pub result: RunResult,
    pub state: TrainState<f32>,
}

/// Trains on `dataset` as configured, evaluating a snapshot of the agent
/// every `eval.every` epochs. `on_checkpoint` sees each snapshot with its
/// metric, e.g. to persist it.
pub fn run_experiment(
    config: &RunConfig,
    dataset: &DemoDataset,
    label: &str,
    mut on_checkpoint: impl FnMut(&TrainState<f32>, &EvalOutcome) -> Result<()>,
) -> Result<Experiment> {
    config.validate()?;
    let env_id = config.env.env_id;
    if dataset.env_id != env_id {
        return Err(Error::Data(format!("dataset was recorded on {}, config asks for {env_id}", dataset.env_id)));
    }
    let pipeline = Pipeline::<f32>::from_config(config)?;
    let spec = make_env(env_id).spec().clone();
    let pc = PolicyConfig::from_run(config, spec.action_dim)?;
    let seed = eval_seed(config.run.seed);
    let mut checkpoints = Vec::new();
    let state = train(dataset, &pipeline, &pc, config.run.seed, config.eval.every, |st| {
        let snapshot = st.agent.clone();
        let out = evaluate_agent(&pipeline, &snapshot, env_id, config.eval.episodes, seed)?;
        checkpoints.push((st.epoch, out.metric));
        on_checkpoint(st, &out)
    })?;
    let best_metric = RunResult::best_of(&checkpoints)?;
    let result = RunResult {
        run_id: config.hash(),
        label: label.to_string(),
        env_id,
        condition_variant: config.condition.variant,
        tap_set: config.taps().to_vec(),
        timestep: config.backbone.timestep,
        seed: config.run.seed,
        checkpoints,
        best_metric,
        metric_kind: spec.metric_kind,
    };
    Ok(Experiment { result, state })
}

/// Generates the job's demonstrations and runs it without persisting
/// checkpoints.
pub fn default_runner(job: &AblationJob) -> Result<RunResult> {
    let c = &job.config;
    let ds = generate_demos(c.env.env_id, c.demos(), c.env.demo_seed)?;
    Ok(run_experiment(c, &ds, &job.label, |_, _| Ok(()))?.result)
}
