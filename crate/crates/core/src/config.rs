//! Declarative run configuration (TOML) with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{default_taps, TOY_BACKEND_ID};
use crate::compression::DEFAULT_COMPRESS_DIM;
use crate::conditioner::{default_caption_key, ConditionVariant};
use crate::envkit::EnvId;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub backend_id: String,
    /// Weights for the backend; empty means the seeded random toy weights.
    pub checkpoint_path: String,
    pub timestep: usize,
    pub taps: Vec<String>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self { backend_id: TOY_BACKEND_ID.into(), checkpoint_path: String::new(), timestep: 0, taps: default_taps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionSection {
    pub variant: ConditionVariant,
    pub l_t: usize,
    pub l_v: usize,
    /// Caption table key; empty picks the entry matching the environment.
    pub caption_key: String,
}

impl Default for ConditionSection {
    fn default() -> Self {
        Self { variant: ConditionVariant::Orca, l_t: 4, l_v: 16, caption_key: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressSection {
    pub dim: usize,
    /// Overrides `backbone.taps` when non-empty.
    pub taps: Vec<String>,
}

impl Default for CompressSection {
    fn default() -> Self {
        Self { dim: DEFAULT_COMPRESS_DIM, taps: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { kind: LossKind::Mse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsSection {
    pub stack: usize,
}

impl Default for ObsSection {
    fn default() -> Self {
        Self { stack: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub hidden_sizes: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `auto` follows the environment (on for press_pad only).
    pub use_proprio: Toggle,
    pub loss: LossSection,
    pub obs: ObsSection,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![256, 256],
            lr: 1e-4,
            epochs: 100,
            batch_size: 32,
            use_proprio: Toggle::Auto,
            loss: LossSection::default(),
            obs: ObsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub env_id: EnvId,
    /// Number of demonstrations; 0 picks the per-task default.
    pub demos: usize,
    pub demo_seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self { env_id: EnvId::PointReach, demos: 0, demo_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub every: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 25, every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, out_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub condition: ConditionSection,
    pub compress: CompressSection,
    pub policy: PolicySection,
    pub env: EnvSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a dotted-key override such as `condition.variant=null`. The
    /// value is parsed as TOML, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().ok_or_else(|| Error::Config("empty key".into()))?;
        let mut cur = &mut doc;
        for p in path {
            cur = cur
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        if !cur.contains_key(*last) || cur[*last].is_table() {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        cur.insert(last.to_string(), parsed);
        let next: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {}", e.message())))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.policy.epochs == 0 {
            return fail("policy.epochs must be at least 1".into());
        }
        if self.policy.batch_size == 0 {
            return fail("policy.batch_size must be at least 1".into());
        }
        if !(self.policy.lr > 0.0) {
            return fail("policy.lr must be positive".into());
        }
        if self.policy.obs.stack == 0 {
            return fail("policy.obs.stack must be at least 1".into());
        }
        if self.compress.dim == 0 {
            return fail("compress.dim must be positive".into());
        }
        if self.eval.every == 0 || self.eval.episodes == 0 {
            return fail("eval.every and eval.episodes must be positive".into());
        }
        if self.taps().is_empty() {
            return fail("at least one tap point is required".into());
        }
        Ok(())
    }

    /// Tap points feeding the compression heads.
    pub fn taps(&self) -> &[String] {
        if self.compress.taps.is_empty() {
            &self.backbone.taps
        } else {
            &self.compress.taps
        }
    }

    pub fn demos(&self) -> usize {
        if self.env.demos == 0 {
            self.env.env_id.default_demos()
        } else {
            self.env.demos
        }
    }

    pub fn use_proprio(&self) -> bool {
        match self.policy.use_proprio {
            Toggle::Auto => self.env.env_id.default_use_proprio(),
            Toggle::On => true,
            Toggle::Off => false,
        }
    }

    pub fn caption_key(&self) -> &str {
        if self.condition.caption_key.is_empty() {
            default_caption_key(self.env.env_id.as_str())
        } else {
            &self.condition.caption_key
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    /// `run.out_dir`, unless the `ORCA_OUT` environment variable is set.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os("ORCA_OUT") {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(&self.run.out_dir),
        }
    }

    /// Dataset location shared by every run with the same demo settings.
    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir()
            .join("datasets")
            .join(format!("{}_n{}_s{}.orca", self.env.env_id, self.demos(), self.env.demo_seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir().join(self.hash())
    }

    /// Every leaf key with its default value, in document order.
    pub fn default_keys() -> Vec<(String, String)> {
        let doc: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("own output parses");
        let mut out = Vec::new();
        flatten("", &doc, &mut out);
        out
    }
}

fn flatten(prefix: &str, t: &toml::Table, out: &mut Vec<(String, String)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) => flatten(&key, inner, out),
            other => out.push((key, other.to_string())),
        }
    }
}
