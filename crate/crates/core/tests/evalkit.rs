use orca_core::conditioner::ConditionVariant;
use orca_core::config::RunConfig;
use orca_core::envkit::{generate_demos, make_env, EnvId, MetricKind};
use orca_core::evalkit::{
    aggregate, evaluate_agent, evaluate_policy, run_ablation, AblationGrid, AblationJob, Axis, ExpertController, RunResult,
};
use orca_core::pipeline::Pipeline;
use orca_core::policy::{load_agent, save_checkpoint, train, Agent, PolicyConfig};
use orca_core::{Error, Result};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn result(label: &str, env: EnvId, seed: u64, best: f64, kind: MetricKind) -> RunResult {
    RunResult {
        run_id: format!("{label}-{env}-{seed}"),
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
fn hand_computed_population_std() {
    let rs: Vec<_> = [1.0, 2.0, 3.0].iter().enumerate().map(|(s, &v)| result("a", EnvId::PointReach, s as u64, v, MetricKind::NormalizedScore)).collect();
    let c = aggregate(&rs).unwrap().rows[0].cells[0].clone().unwrap();
    assert!((c.mean - 2.0).abs() < 1e-12);
    assert!((c.std - 0.816_496_580_9).abs() < 1e-9);
    let one = aggregate(&rs[..1]).unwrap().rows[0].cells[0].clone().unwrap();
    assert_eq!(one.std, 0.0);
}

#[test]
fn mixed_metric_kinds_do_not_aggregate() {
    let rs = [
        result("a", EnvId::PressPad, 0, 1.0, MetricKind::SuccessRate),
        result("a", EnvId::PressPad, 1, 0.5, MetricKind::NormalizedScore),
    ];
    assert!(matches!(aggregate(&rs), Err(Error::Aggregation(_))));
}

#[test]
fn expert_and_random_policies_bracket_the_metric() {
    let expert = evaluate_policy(EnvId::PointReach, &mut ExpertController, 25, 1).unwrap();
    assert!(expert.metric >= 0.95, "{}", expert.metric);

    let mut cfg = RunConfig::default();
    cfg.env.env_id = EnvId::PressPad;
    cfg.condition.variant = ConditionVariant::Null;
    cfg.policy.hidden_sizes = vec![32];
    let pipeline = Pipeline::<f32>::from_config(&cfg).unwrap();
    let spec = make_env(EnvId::PressPad).spec().clone();
    let pc = PolicyConfig::from_run(&cfg, spec.action_dim).unwrap();
    let agent = Agent::new(&mut ChaCha8Rng::seed_from_u64(0), &pipeline, &pc, spec.proprio_dim).unwrap();
    let random = evaluate_agent(&pipeline, &agent, EnvId::PressPad, 25, 2).unwrap();
    assert_eq!(random.metric_kind, MetricKind::SuccessRate);
    assert!(random.metric < 0.1, "{}", random.metric);
}

#[test]
fn evaluating_leaves_the_checkpoint_untouched() {
    let mut cfg = RunConfig::default();
    cfg.condition.variant = ConditionVariant::Null;
    cfg.policy.hidden_sizes = vec![16];
    cfg.policy.epochs = 1;
    let pipeline = Pipeline::<f32>::from_config(&cfg).unwrap();
    let ds = generate_demos(EnvId::PointReach, 1, 0).unwrap();
    let pc = PolicyConfig::from_run(&cfg, 2).unwrap();
    let state = train(&ds, &pipeline, &pc, 0, 1, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e001.orca");
    save_checkpoint(&state, serde_json::json!({}), &path).unwrap();
    let before = std::fs::read(&path).unwrap();
    let ck = load_agent(&path, &pipeline, &pc).unwrap();
    let a = evaluate_agent(&pipeline, &ck.agent, EnvId::PointReach, 3, 4).unwrap();
    let b = evaluate_agent(&pipeline, &ck.agent, EnvId::PointReach, 3, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, std::fs::read(&path).unwrap());

    let wrong = PolicyConfig::from_run(&cfg, 3).unwrap();
    assert!(load_agent(&path, &pipeline, &wrong).is_err());
}

#[test]
fn failed_cells_make_a_partial_table() {
    let grid = AblationGrid::new(Axis::Components, RunConfig::default());
    let dir = tempfile::tempdir().unwrap();
    let runner = |job: &AblationJob| -> Result<RunResult> {
        if job.label == "p_v only" {
            return Err(Error::Data("synthetic failure".into()));
        }
        Ok(result(&job.label, job.env_id, job.seed, 0.5, MetricKind::NormalizedScore))
    };
    let report = run_ablation(&grid, &[EnvId::PointReach, EnvId::TwoLinkReach], &[0, 1], 2, dir.path(), &runner).unwrap();
    assert!(report.is_partial());
    assert_eq!(report.results.len() + report.failures.len(), 4 * 2 * 2);
    let text = report.summary_text();
    assert!(text.contains("FAILED"), "{text}");
    for f in ["runs.csv", "summary.csv", "summary.txt"] {
        assert!(dir.path().join(f).exists());
    }
    assert_eq!(std::fs::read_dir(dir.path().join("cells")).unwrap().count(), 12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn best_metric_is_the_checkpoint_max(ms in prop::collection::vec(0.0f64..1.0, 1..12)) {
        let cps: Vec<(usize, f64)> = ms.iter().enumerate().map(|(i, &m)| (10 * (i + 1), m)).collect();
        let best = RunResult::best_of(&cps).unwrap();
        prop_assert!(cps.iter().all(|c| c.1 <= best));
        prop_assert!(cps.iter().any(|c| c.1 == best));
    }

    #[test]
    fn summary_grid_is_complete(vals in prop::collection::vec(0.0f64..1.0, 1..6), n_tasks in 1usize..4) {
        let tasks = &EnvId::ALL[..n_tasks];
        let mut rs = Vec::new();
        for (i, &v) in vals.iter().enumerate() {
            for &t in tasks {
                rs.push(result(&format!("row{}", i % 2), t, i as u64, v, MetricKind::NormalizedScore));
            }
        }
        let s = aggregate(&rs).unwrap();
        prop_assert_eq!(s.tasks.len(), n_tasks);
        for row in &s.rows {
            prop_assert_eq!(row.cells.len(), n_tasks);
            let c = row.cells.iter().map(|c| c.as_ref().unwrap()).collect::<Vec<_>>();
            prop_assert!(c.iter().all(|c| c.std >= 0.0 && c.mean >= 0.0 && c.mean <= 1.0));
            let mean = c.iter().map(|c| c.mean).sum::<f64>() / n_tasks as f64;
            prop_assert!((row.mean.unwrap() - mean).abs() < 1e-12);
        }
    }
}
