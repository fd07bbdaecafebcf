use std::path::Path;

use orca_tape::{Module, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{Agent, PolicyConfig, TrainState};
use crate::archive::{Archive, Entry};
use crate::pipeline::Pipeline;
use crate::{Error, Result};

/// A loaded checkpoint: the agent plus the stored run manifest.
#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub agent: Agent<S>,
    pub manifest: Value,
}

/// Writes prompt bank, compression (with running statistics), policy and
/// optimizer moments. `run` is merged into the manifest.
pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, run: Value, path: impl AsRef<Path>) -> Result<()> {
    let mut manifest = json!({
        "kind": "checkpoint",
        "epoch": state.epoch,
        "seed": state.seed,
        "steps": state.losses.len(),
        "adam_step": state.adam.step,
        "proprio_dim": state.agent.proprio_dim,
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut manifest, run) {
        m.extend(extra);
    }
    let mut a = Archive::new(manifest);
    for p in state.agent.params() {
        a.insert(p.name.clone(), Entry::tensor(&p.value));
    }
    for h in &state.agent.compression.heads {
        a.insert(format!("compress.{}.bn.running_mean", h.block), Entry::f64(&[h.running_mean.len()], &h.running_mean));
        a.insert(format!("compress.{}.bn.running_var", h.block), Entry::f64(&[h.running_var.len()], &h.running_var));
    }
    for (i, (m, v)) in state.adam.m.iter().zip(&state.adam.v).enumerate() {
        a.insert(format!("adam.m.{i:04}"), Entry::tensor(m));
        a.insert(format!("adam.v.{i:04}"), Entry::tensor(v));
    }
    a.save(path)
}

/// Rebuilds the agent stored at `path` for `pipeline`.
pub fn load_agent<S: Scalar>(path: impl AsRef<Path>, pipeline: &Pipeline<S>, config: &PolicyConfig) -> Result<Checkpoint<S>> {
    let a = Archive::load(path.as_ref())?;
    if a.manifest["kind"] != "checkpoint" {
        return Err(Error::Data(format!("{} is not a checkpoint", path.as_ref().display())));
    }
    let proprio_dim = a.manifest["proprio_dim"].as_u64().ok_or_else(|| Error::Data("checkpoint lacks proprio_dim".into()))? as usize;
    let mut agent = Agent::new(&mut ChaCha8Rng::seed_from_u64(0), pipeline, config, proprio_dim)?;
    for p in agent.params_mut() {
        let t: Tensor<S> = a.get(&p.name)?.to_tensor()?;
        if t.shape() != p.value.shape() {
            return Err(Error::Data(format!("checkpoint entry `{}` has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
        }
        p.value = t;
    }
    for h in &mut agent.compression.heads {
        let dim = h.running_mean.len();
        let mean = a.get(&format!("compress.{}.bn.running_mean", h.block))?.to_f64()?;
        let var = a.get(&format!("compress.{}.bn.running_var", h.block))?.to_f64()?;
        if mean.len() != dim || var.len() != dim {
            return Err(Error::Data(format!("running statistics of `{}` have the wrong length", h.block)));
        }
        h.running_mean = mean;
        h.running_var = var;
    }
    Ok(Checkpoint { agent, manifest: a.manifest })
}
