use serde::{Deserialize, Serialize};

use crate::conditioner::ConditionVariant;
use crate::envkit::{EnvId, MetricKind};
use crate::error::contract;
use crate::{Error, Result};

/// Outcome of one training run with periodic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Config hash of the run.
    pub run_id: String,
    /// Row the run belongs to in a summary table.
    pub label: String,
    pub env_id: EnvId,
    pub condition_variant: ConditionVariant,
    pub tap_set: Vec<String>,
    pub timestep: usize,
    pub seed: u64,
    /// `(epoch, metric)` per evaluated checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
    pub best_metric: f64,
    pub metric_kind: MetricKind,
}

impl RunResult {
    /// Maximum over checkpoint metrics.
    pub fn best_of(checkpoints: &[(usize, f64)]) -> Result<f64> {
        contract!(!checkpoints.is_empty(), "a run needs at least one evaluated checkpoint");
        Ok(checkpoints.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn tap_set_label(&self) -> String {
        self.tap_set.join("+")
    }
}

/// Seed statistics of one (row, task) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub seeds: usize,
    pub metric_kind: MetricKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    /// One entry per task column; `None` when no run of the cell finished.
    pub cells: Vec<Option<CellStats>>,
    /// Mean of the populated cell means.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub tasks: Vec<EnvId>,
    pub rows: Vec<SummaryRow>,
}

fn cell(values: &[&RunResult]) -> Result<Option<CellStats>> {
    let Some(first) = values.first() else { return Ok(None) };
    if let Some(odd) = values.iter().find(|r| r.metric_kind != first.metric_kind) {
        return Err(Error::Aggregation(format!(
            "cell ({}, {}) mixes {} and {}",
            first.label,
            first.env_id,
            first.metric_kind.as_str(),
            odd.metric_kind.as_str()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|r| r.best_metric).sum::<f64>() / n;
    let var = values.iter().map(|r| (r.best_metric - mean).powi(2)).sum::<f64>() / n;
    Ok(Some(CellStats { mean, std: var.sqrt(), seeds: values.len(), metric_kind: first.metric_kind }))
}

/// Summary with the given row and column order; cells without results stay
/// empty.
pub fn summarize(labels: &[String], tasks: &[EnvId], results: &[RunResult]) -> Result<Summary> {
    let mut rows = Vec::with_capacity(labels.len());
    for label in labels {
        let mut cells = Vec::with_capacity(tasks.len());
        for &task in tasks {
            let vals: Vec<&RunResult> = results.iter().filter(|r| &r.label == label && r.env_id == task).collect();
            cells.push(cell(&vals)?);
        }
        let done: Vec<f64> = cells.iter().flatten().map(|c| c.mean).collect();
        let mean = (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64);
        rows.push(SummaryRow { label: label.clone(), cells, mean });
    }
    Ok(Summary { tasks: tasks.to_vec(), rows })
}

/// Per-(label, task) mean and population std over seeds, rows and columns
/// in order of first appearance.
pub fn aggregate(results: &[RunResult]) -> Result<Summary> {
    contract!(!results.is_empty(), "nothing to aggregate");
    let mut labels: Vec<String> = Vec::new();
    let mut tasks: Vec<EnvId> = Vec::new();
    for r in results {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
        if !tasks.contains(&r.env_id) {
            tasks.push(r.env_id);
        }
    }
    summarize(&labels, &tasks, results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(label: &str, env: EnvId, seed: u64, best: f64, kind: MetricKind) -> RunResult {
        RunResult {
            run_id: format!("{label}-{seed}"),
            label: label.into(),
            env_id: env,
            condition_variant: ConditionVariant::Orca,
            tap_set: vec!["mid".into()],
            timestep: 0,
            seed,
            checkpoints: vec![(10, best)],
            best_metric: best,
            metric_kind: kind,
        }
    }

    #[test]
    fn population_std_and_row_mean() {
        let rs: Vec<_> = [1.0, 2.0, 3.0]
            .iter()
            .enumerate()
            .map(|(s, &v)| run("a", EnvId::PointReach, s as u64, v, MetricKind::NormalizedScore))
            .chain([run("a", EnvId::PressPad, 0, 0.5, MetricKind::SuccessRate)])
            .collect();
        let s = aggregate(&rs).unwrap();
        let c = s.rows[0].cells[0].as_ref().unwrap();
        assert_eq!(c.mean, 2.0);
        assert!((c.std - 0.816_496_580_927_726).abs() < 1e-12);
        assert_eq!(s.rows[0].cells[1].as_ref().unwrap().std, 0.0);
        assert_eq!(s.rows[0].mean, Some(1.25));
    }

    #[test]
    fn mixed_kinds_fail() {
        let rs = vec![
            run("a", EnvId::PointReach, 0, 1.0, MetricKind::NormalizedScore),
            run("a", EnvId::PointReach, 1, 1.0, MetricKind::SuccessRate),
        ];
        assert!(matches!(aggregate(&rs), Err(Error::Aggregation(_))));
    }

    #[test]
    fn best_is_max() {
        assert_eq!(RunResult::best_of(&[(10, 0.2), (20, 0.7), (30, 0.5)]).unwrap(), 0.7);
        assert!(RunResult::best_of(&[]).is_err());
    }
}
