use orca_core::envkit::{generate_demos, load_dataset, make_env, save_dataset, DemoDataset, EnvId, MetricKind};
use orca_core::Error;
use proptest::prelude::*;

#[test]
fn frames_have_the_renderer_contract() {
    for id in EnvId::ALL {
        let mut env = make_env(id);
        let obs = env.reset(3);
        let f = &obs.frame;
        assert_eq!((f.height, f.width), (64, 64));
        assert_eq!(env.spec().image_size, (64, 64, 3));
        let t = f.to_chw::<f64>();
        assert_eq!(t.shape(), &[3, 64, 64]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(obs.proprio.len(), env.spec().proprio_dim);
    }
}

#[test]
fn expert_clears_the_quality_bar() {
    for id in EnvId::ALL {
        let mut total = 0.0;
        let mut env = make_env(id);
        for seed in 0..100 {
            env.reset(seed);
            for _ in 0..env.spec().episode_len {
                let a = env.expert_action();
                if env.step(&a).unwrap().done {
                    break;
                }
            }
            total += env.episode_metric();
        }
        let mean = total / 100.0;
        match env.spec().metric_kind {
            MetricKind::NormalizedScore => assert!(mean >= 0.95, "{id}: {mean}"),
            MetricKind::SuccessRate => assert_eq!(mean, 1.0, "{id}"),
        }
    }
}

#[test]
fn stepping_past_the_end_is_a_protocol_error() {
    let mut env = make_env(EnvId::PointReach);
    env.reset(0);
    for _ in 0..env.spec().episode_len {
        env.step(&[0.0, 0.0]).unwrap();
    }
    assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::Protocol(_))));
}

#[test]
fn zero_action_keeps_the_reach_pose() {
    let mut env = make_env(EnvId::PointReach);
    let first = env.reset(5);
    let a = env.step(&[0.0, 0.0]).unwrap();
    let b = env.step(&[0.0, 0.0]).unwrap();
    assert_eq!(first.frame, a.observation.frame);
    assert_eq!(a.reward, b.reward);
}

#[test]
fn out_of_bounds_actions_are_clipped_and_flagged() {
    let mut env = make_env(EnvId::PointReach);
    env.reset(1);
    assert!(env.step(&[3.0, 0.0]).unwrap().clipped);
    assert!(!env.step(&[0.5, -0.5]).unwrap().clipped);
}

#[test]
fn demo_counts_follow_the_task_family() {
    assert_eq!(EnvId::PointReach.default_demos(), 5);
    assert_eq!(EnvId::TwoLinkReach.default_demos(), 5);
    assert_eq!(EnvId::PressPad.default_demos(), 2);
}

fn archive_bytes(ds: &DemoDataset) -> Vec<u8> {
    ds.to_archive().to_bytes()
}

#[test]
fn dataset_files_are_bitwise_stable() {
    let dir = tempfile::tempdir().unwrap();
    for id in EnvId::ALL {
        let a = generate_demos(id, 2, 7).unwrap();
        let b = generate_demos(id, 2, 7).unwrap();
        let (pa, pb) = (dir.path().join("a.orca"), dir.path().join("b.orca"));
        save_dataset(&a, &pa).unwrap();
        save_dataset(&b, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        let back = load_dataset(&pa).unwrap();
        assert_eq!(back, a);
        assert_eq!(archive_bytes(&back), archive_bytes(&a));
        for ep in &a.episodes {
            assert!(ep.metric >= 0.95 || ep.success, "{id}: stored episode below the bar");
            assert_eq!(ep.actions.len(), ep.rewards.len());
            assert!(ep.rewards.iter().all(|r| r.is_finite()));
            assert!(ep.len() <= make_env(id).spec().episode_len);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_seed_and_actions_give_the_same_episode(seed in any::<u64>(), actions in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 1..20)) {
        let run = || {
            let mut env = make_env(EnvId::PointReach);
            let mut frames = vec![env.reset(seed).frame];
            let mut rewards = Vec::new();
            for &(x, y) in &actions {
                let tr = env.step(&[x, y]).unwrap();
                frames.push(tr.observation.frame);
                rewards.push(tr.reward);
            }
            (frames, rewards)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn frames_are_a_function_of_state(seed in any::<u64>(), other in any::<u64>(), id in prop::sample::select(EnvId::ALL.to_vec())) {
        let mut a = make_env(id);
        let mut b = make_env(id);
        a.reset(seed);
        b.reset(other);
        b.set_state(&a.state()).unwrap();
        prop_assert_eq!(a.observe().frame, b.observe().frame);
        prop_assert_eq!(a.describe(), b.describe());
    }
}
