use std::path::Path;

use serde_json::json;

use super::{EnvId, QUALITY_BAR};
use crate::archive::{Archive, Entry};
use crate::{Error, Frame, Result};

/// One recorded trajectory; `observations[i]` is what the agent saw before
/// taking `actions[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Episode {
    pub observations: Vec<Frame>,
    pub proprios: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f32>>,
    pub rewards: Vec<f32>,
    /// Simulator state per step, for re-rendering masks.
    pub states: Vec<Vec<f32>>,
    pub success: bool,
    pub metric: f64,
    pub seed: u64,
    /// Some action was clipped to the bounds.
    pub clipped: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub env_id: EnvId,
    pub episodes: Vec<Episode>,
    pub generator_seed: u64,
    pub expert_id: String,
    /// Expert episodes discarded for missing the quality bar.
    pub rejected: usize,
}

impl DemoDataset {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(json!({
            "kind": "demo_dataset",
            "env_id": self.env_id.as_str(),
            "generator_seed": self.generator_seed,
            "expert_id": self.expert_id,
            "episodes": self.episodes.len(),
            "steps": self.num_steps(),
            "quality_bar": QUALITY_BAR,
            "rejected": self.rejected,
            "episode_meta": self.episodes.iter().map(|e| json!({
                "seed": e.seed,
                "success": e.success,
                "metric": e.metric,
                "clipped": e.clipped,
            })).collect::<Vec<_>>(),
        }));
        for (i, ep) in self.episodes.iter().enumerate() {
            let t = ep.len();
            let (h, w) = ep.observations.first().map_or((0, 0), |f| (f.height, f.width));
            let pixels: Vec<u8> = ep.observations.iter().flat_map(|f| f.pixels.iter().copied()).collect();
            a.insert(format!("ep{i:03}/observations"), Entry::u8(&[t, h, w, 3], &pixels));
            let rows = |v: &[Vec<f32>]| {
                let k = v.first().map_or(0, Vec::len);
                Entry::f32(&[v.len(), k], &v.iter().flatten().copied().collect::<Vec<_>>())
            };
            a.insert(format!("ep{i:03}/proprios"), rows(&ep.proprios));
            a.insert(format!("ep{i:03}/actions"), rows(&ep.actions));
            a.insert(format!("ep{i:03}/states"), rows(&ep.states));
            a.insert(format!("ep{i:03}/rewards"), Entry::f32(&[t], &ep.rewards));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let m = &a.manifest;
        let bad = |what: &str| Error::Data(format!("dataset manifest: missing or invalid `{what}`"));
        if m["kind"] != "demo_dataset" {
            return Err(bad("kind"));
        }
        let env_id: EnvId = m["env_id"].as_str().ok_or_else(|| bad("env_id"))?.parse()?;
        let meta = m["episode_meta"].as_array().ok_or_else(|| bad("episode_meta"))?;
        let mut episodes = Vec::with_capacity(meta.len());
        for (i, em) in meta.iter().enumerate() {
            let obs = a.get(&format!("ep{i:03}/observations"))?;
            let shape = obs.shape.clone();
            if shape.len() != 4 || shape[3] != 3 {
                return Err(Error::Data(format!("episode {i}: observation shape {shape:?}")));
            }
            let (t, h, w) = (shape[0], shape[1], shape[2]);
            let px = obs.as_u8()?;
            let observations = (0..t).map(|k| Frame::new(h, w, px[k * h * w * 3..(k + 1) * h * w * 3].to_vec())).collect();
            let rows = |name: &str| -> Result<Vec<Vec<f32>>> {
                let e = a.get(&format!("ep{i:03}/{name}"))?;
                let s = e.shape.clone();
                let v = e.to_f32()?;
                if s.len() != 2 || s[0] != t {
                    return Err(Error::Data(format!("episode {i}: `{name}` shape {s:?} for {t} steps")));
                }
                Ok(v.chunks(s[1].max(1)).take(t).map(|c| c[..s[1]].to_vec()).collect())
            };
            let rewards = a.get(&format!("ep{i:03}/rewards"))?.to_f32()?;
            if rewards.len() != t {
                return Err(Error::Data(format!("episode {i}: {} rewards for {t} steps", rewards.len())));
            }
            episodes.push(Episode {
                observations,
                proprios: rows("proprios")?,
                actions: rows("actions")?,
                rewards,
                states: rows("states")?,
                success: em["success"].as_bool().ok_or_else(|| bad("success"))?,
                metric: em["metric"].as_f64().ok_or_else(|| bad("metric"))?,
                seed: em["seed"].as_u64().ok_or_else(|| bad("seed"))?,
                clipped: em["clipped"].as_bool().ok_or_else(|| bad("clipped"))?,
            });
        }
        if episodes.is_empty() {
            return Err(Error::Data("dataset has no episodes".into()));
        }
        Ok(Self {
            env_id,
            episodes,
            generator_seed: m["generator_seed"].as_u64().ok_or_else(|| bad("generator_seed"))?,
            expert_id: m["expert_id"].as_str().ok_or_else(|| bad("expert_id"))?.to_string(),
            rejected: m["rejected"].as_u64().ok_or_else(|| bad("rejected"))? as usize,
        })
    }
}

pub fn save_dataset(ds: &DemoDataset, path: impl AsRef<Path>) -> Result<()> {
    ds.to_archive().save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DemoDataset> {
    DemoDataset::from_archive(&Archive::load(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envkit::generate_demos;

    #[test]
    fn archive_roundtrip_is_exact() {
        let ds = generate_demos(EnvId::PointReach, 2, 5).unwrap();
        let bytes = ds.to_archive().to_bytes();
        let back = DemoDataset::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_archive().to_bytes(), bytes);
    }
}
