use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{summarize, RunResult, Summary};
use crate::backbone::{default_taps, DOWN_1, DOWN_2, DOWN_3, MID, UP_0, UP_1, UP_2};
use crate::conditioner::ConditionVariant;
use crate::config::RunConfig;
use crate::envkit::EnvId;
use crate::error::contract;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Components,
    Layers,
    Timesteps,
    Variants,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Components, Axis::Layers, Axis::Timesteps, Axis::Variants];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::Layers => "layers",
            Axis::Timesteps => "timesteps",
            Axis::Variants => "variants",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown axis `{s}` (expected components, layers, timesteps or variants)")))
    }
}

/// One row of a grid: a label and the config overrides that define it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValue {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl GridValue {
    fn new(label: impl Into<String>, overrides: &[(&str, String)]) -> Self {
        Self { label: label.into(), overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect() }
    }
}

fn taps_value(taps: &[&str]) -> String {
    format!("[{}]", taps.iter().map(|t| format!("\"{t}\"")).collect::<Vec<_>>().join(", "))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub axis: Axis,
    pub values: Vec<GridValue>,
    pub base: RunConfig,
}

impl AblationGrid {
    /// The standard rows of `axis` over `base`.
    pub fn new(axis: Axis, base: RunConfig) -> Self {
        let variant = |v: ConditionVariant| ("condition.variant", v.as_str().to_string());
        let values = match axis {
            Axis::Components => vec![
                GridValue::new("neither", &[variant(ConditionVariant::Null)]),
                GridValue::new("p_t only", &[variant(ConditionVariant::TaskOnly)]),
                GridValue::new("p_v only", &[variant(ConditionVariant::VisualOnly)]),
                GridValue::new("both", &[variant(ConditionVariant::Orca)]),
            ],
            Axis::Layers => {
                let mut v: Vec<GridValue> = [DOWN_1, DOWN_2, DOWN_3, MID, UP_0, UP_1, UP_2]
                    .iter()
                    .map(|t| GridValue::new(*t, &[("compress.taps", taps_value(&[t]))]))
                    .collect();
                let all: Vec<String> = default_taps();
                let all: Vec<&str> = all.iter().map(String::as_str).collect();
                v.push(GridValue::new("down_1-3+mid", &[("compress.taps", taps_value(&all))]));
                v
            }
            Axis::Timesteps => [200, 100, 0].iter().map(|t| GridValue::new(t.to_string(), &[("backbone.timestep", t.to_string())])).collect(),
            Axis::Variants => ConditionVariant::ALL.iter().map(|&v| GridValue::new(v.as_str(), &[variant(v)])).collect(),
        };
        Self { axis, values, base }
    }

    pub fn labels(&self) -> Vec<String> {
        self.values.iter().map(|v| v.label.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("ablation grid has no values".into()));
        }
        let labels = self.labels();
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("ablation value `{l}` listed twice")));
            }
        }
        Ok(())
    }

    /// One job per (value, task, seed), value-major.
    pub fn jobs(&self, tasks: &[EnvId], seeds: &[u64]) -> Result<Vec<AblationJob>> {
        self.validate()?;
        contract!(!tasks.is_empty() && !seeds.is_empty(), "ablation needs at least one task and one seed");
        let mut jobs = Vec::new();
        for v in &self.values {
            for &task in tasks {
                for &seed in seeds {
                    let mut c = self.base.clone();
                    for (k, val) in &v.overrides {
                        c.set(k, val)?;
                    }
                    c.env.env_id = task;
                    c.run.seed = seed;
                    c.validate()?;
                    jobs.push(AblationJob { label: v.label.clone(), env_id: task, seed, config: c });
                }
            }
        }
        Ok(jobs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationJob {
    pub label: String,
    pub env_id: EnvId,
    pub seed: u64,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub label: String,
    pub env_id: EnvId,
    pub seed: u64,
    pub run_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub axis: Axis,
    pub results: Vec<RunResult>,
    pub failures: Vec<Failure>,
    pub summary: Summary,
}

impl AblationReport {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    /// One line per (run, evaluated checkpoint); failed runs get one line
    /// with the error in the metric column.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("run_id,env_id,variant,tap_set,timestep,seed,epoch,metric,best_metric\n");
        for r in &self.results {
            for (epoch, m) in &r.checkpoints {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{epoch},{m},{}",
                    r.run_id,
                    r.env_id,
                    r.condition_variant,
                    r.tap_set_label(),
                    r.timestep,
                    r.seed,
                    r.best_metric
                );
            }
        }
        for f in &self.failures {
            let _ = writeln!(s, "{},{},,,,{},,{},", f.run_id, f.env_id, f.seed, csv_text(&format!("FAILED: {}", f.message)));
        }
        s
    }

    fn cell_text(&self, row: usize, col: usize) -> String {
        let r = &self.summary.rows[row];
        match &r.cells[col] {
            Some(c) => {
                let failed = self.failures.iter().any(|f| f.label == r.label && f.env_id == self.summary.tasks[col]);
                format!("{:.4}±{:.4}{}", c.mean, c.std, if failed { " (partial)" } else { "" })
            }
            None => "FAILED".into(),
        }
    }

    fn table(&self) -> Vec<Vec<String>> {
        let mut head = vec![self.axis.as_str().to_string()];
        head.extend(self.summary.tasks.iter().map(|t| t.to_string()));
        head.push("mean".into());
        let mut rows = vec![head];
        for (i, r) in self.summary.rows.iter().enumerate() {
            let mut line = vec![r.label.clone()];
            line.extend((0..self.summary.tasks.len()).map(|j| self.cell_text(i, j)));
            line.push(r.mean.map_or_else(|| "-".into(), |m| format!("{m:.4}")));
            rows.push(line);
        }
        rows
    }

    pub fn summary_csv(&self) -> String {
        self.table().iter().map(|r| r.iter().map(|c| csv_text(c)).collect::<Vec<_>>().join(",") + "\n").collect()
    }

    pub fn summary_text(&self) -> String {
        let t = self.table();
        let widths: Vec<usize> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for (i, r) in t.iter().enumerate() {
            let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
            if i == 0 {
                s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                s.push('\n');
            }
        }
        s
    }
}

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs every job of the grid on a pool of `workers` threads, writing one
/// JSON record per finished cell under `out_dir/cells`, then `runs.csv`,
/// `summary.csv` and `summary.txt`. Failed runs are reported, not raised.
pub fn run_ablation(
    grid: &AblationGrid,
    tasks: &[EnvId],
    seeds: &[u64],
    workers: usize,
    out_dir: &Path,
    runner: &(dyn Fn(&AblationJob) -> Result<RunResult> + Sync),
) -> Result<AblationReport> {
    let jobs = grid.jobs(tasks, seeds)?;
    let cells = out_dir.join("cells");
    std::fs::create_dir_all(&cells).map_err(|e| Error::io(&cells, e))?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let out = runner(job).and_then(|r| {
                    let json = serde_json::to_vec_pretty(&r).expect("record serializes");
                    write_atomic(&cells.join(format!("{}.json", r.run_id)), &json)?;
                    Ok(r)
                });
                slots.lock().expect("no worker panicked")[i] = Some(out);
            });
        }
    });
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (job, slot) in jobs.iter().zip(slots.into_inner().expect("no worker panicked")) {
        match slot.expect("every job ran") {
            Ok(r) => results.push(r),
            Err(e) => failures.push(Failure {
                label: job.label.clone(),
                env_id: job.env_id,
                seed: job.seed,
                run_id: job.config.hash(),
                message: e.to_string(),
            }),
        }
    }
    let summary = summarize(&grid.labels(), tasks, &results)?;
    let report = AblationReport { axis: grid.axis, results, failures, summary };
    write_atomic(&out_dir.join("runs.csv"), report.runs_csv().as_bytes())?;
    write_atomic(&out_dir.join("summary.csv"), report.summary_csv().as_bytes())?;
    write_atomic(&out_dir.join("summary.txt"), report.summary_text().as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envkit::MetricKind;

    #[test]
    fn standard_rows() {
        let rows = |a| AblationGrid::new(a, RunConfig::default()).labels();
        assert_eq!(rows(Axis::Timesteps), vec!["200", "100", "0"]);
        assert_eq!(rows(Axis::Components), vec!["neither", "p_t only", "p_v only", "both"]);
        assert_eq!(
            rows(Axis::Layers),
            vec!["down_1", "down_2", "down_3", "mid", "up_0", "up_1", "up_2", "down_1-3+mid"]
        );
        assert_eq!(rows(Axis::Variants).len(), 7);
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn jobs_apply_overrides() {
        let g = AblationGrid::new(Axis::Layers, RunConfig::default());
        let jobs = g.jobs(&[EnvId::PointReach, EnvId::PressPad], &[0, 1]).unwrap();
        assert_eq!(jobs.len(), 8 * 2 * 2);
        assert_eq!(jobs[0].config.taps(), ["down_1"]);
        assert_eq!(jobs[31].config.taps(), default_taps().as_slice());
        assert_eq!(jobs[3].config.env.env_id, EnvId::PressPad);
        assert_eq!(jobs[3].config.run.seed, 1);
        let mut dup = g.clone();
        dup.values.push(dup.values[0].clone());
        assert!(dup.validate().is_err());
    }

    #[test]
    fn failures_are_annotated() {
        let dir = tempfile::tempdir().unwrap();
        let g = AblationGrid::new(Axis::Timesteps, RunConfig::default());
        let runner = |j: &AblationJob| -> Result<RunResult> {
            if j.label == "100" && j.env_id == EnvId::PressPad {
                return Err(Error::Data("boom".into()));
            }
            let m = j.seed as f64 / 10.0;
            Ok(RunResult {
                run_id: j.config.hash(),
                label: j.label.clone(),
                env_id: j.env_id,
                condition_variant: j.config.condition.variant,
                tap_set: j.config.taps().to_vec(),
                timestep: j.config.backbone.timestep,
                seed: j.seed,
                checkpoints: vec![(10, m)],
                best_metric: m,
                metric_kind: if j.env_id == EnvId::PressPad { MetricKind::SuccessRate } else { MetricKind::NormalizedScore },
            })
        };
        let r = run_ablation(&g, &[EnvId::PointReach, EnvId::PressPad], &[1, 2], 3, dir.path(), &runner).unwrap();
        assert!(r.is_partial());
        assert_eq!(r.failures.len(), 2);
        assert_eq!(r.summary.rows.len(), 3);
        assert!(r.summary.rows[1].cells[1].is_none());
        let text = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(text.contains("FAILED"));
        assert_eq!(std::fs::read_dir(dir.path().join("cells")).unwrap().count(), 10);
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().next().unwrap().ends_with(",mean"));
    }
}
