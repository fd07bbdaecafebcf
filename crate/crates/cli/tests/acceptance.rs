//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance -- 4 5` runs a subset by number.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use orca_core::attnlab::{capture, CaptureOptions};
use orca_core::backbone::{
    default_taps, described_frames, noise_latent, pretrain_denoiser, LatentTensor, NoiseSchedule, PretrainConfig, Space,
    ToyUNet, ToyUNetConfig,
};
use orca_core::conditioner::{caption, ConditionVariant, Conditioner, TextEncoderConfig, VisionEncoderConfig};
use orca_core::config::RunConfig;
use orca_core::envkit::{generate_demos, make_env, EnvId};
use orca_core::evalkit::run_experiment;
use orca_core::pipeline::{FrameInput, Pipeline};
use orca_core::policy::{loss_graph, Agent, LossKind, PolicyConfig, Sample, Trainer};
use orca_core::{Frame, Tensor};
use orca_tape::{checksum, Graph, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(started: Instant, budget: Duration) -> Result<(), String> {
    ensure(started.elapsed() < budget, format!("took {:.1?}, budget {budget:?}", started.elapsed()))
}

fn orca() -> &'static str {
    env!("CARGO_BIN_EXE_orca")
}

fn cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(orca()).args(args).env("ORCA_OUT", out).output().map_err(|e| e.to_string())?;
    ensure(
        o.status.success(),
        format!("`orca {}` exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr)),
    )
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

/// Every file below `dir`, relative paths in sorted order.
fn tree(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).expect("below root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn same_trees(a: &Path, b: &Path, skip: impl Fn(&Path) -> bool) -> Result<usize, String> {
    let (ta, tb) = (tree(a), tree(b));
    ensure(ta == tb, format!("file sets differ: {ta:?} vs {tb:?}"))?;
    let mut n = 0;
    for rel in ta.iter().filter(|p| !skip(p)) {
        ensure(read(&a.join(rel))? == read(&b.join(rel))?, format!("{} differs between runs", rel.display()))?;
        n += 1;
    }
    Ok(n)
}

/// Forward noising against a scalar loop over betas rebuilt from scratch.
fn noising_oracle() -> Outcome {
    let t0 = Instant::now();
    let schedule = NoiseSchedule::default();
    let (steps, b0, b1) = (1000usize, 0.00085f64, 0.012f64);
    let bar = |t: usize| {
        let mut acc = 1.0f64;
        for i in 0..t {
            let s = b0.sqrt() + (b1.sqrt() - b0.sqrt()) * i as f64 / (steps - 1) as f64;
            acc *= 1.0 - s * s;
        }
        acc
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let t = if case < 10 { case * 100 } else { rng.random_range(0..=steps) };
        let n = rng.random_range(1..=64);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lat = |v: &[f64]| LatentTensor { values: Tensor::<f64>::from_f64(&[1, 1, n], v), space: Space::Latent };
        let got = noise_latent(&lat(&z), t, &lat(&e), &schedule).map_err(|e| e.to_string())?;
        let a = bar(t);
        for i in 0..n {
            let want = a.sqrt() * z[i] + (1.0 - a).sqrt() * e[i];
            worst = worst.max((got.values.data()[i] - want).abs());
        }
        if t == 0 {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            ensure(bits(got.values.data()) == bits(&z), "t = 0 changed the latent")?;
        }
    }
    ensure(worst <= 1e-6, format!("max abs error {worst:.3e}"))?;
    within(t0, Duration::from_secs(5))?;
    Ok(format!("1000 cases, max abs error {worst:.2e}, t=0 bitwise, {:.2?}", t0.elapsed()))
}

fn frozen_set() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let pipeline = Pipeline::<f32>::from_config(&cfg).map_err(|e| e.to_string())?;
    let ds = generate_demos(EnvId::PointReach, 5, 0).map_err(|e| e.to_string())?;
    let pc = PolicyConfig::from_run(&cfg, 2).map_err(|e| e.to_string())?;
    let sums = |p: &Pipeline<f32>| (p.backend.checksum(), checksum(p.conditioner.text.params()), checksum(p.conditioner.vision.params()));
    let before = sums(&pipeline);
    let mut trainer = Trainer::new(&ds, &pipeline, &pc, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut min_norm = f64::INFINITY;
    for step in 0..50 {
        let batch: Vec<usize> = (0..pc.batch_size).map(|_| rng.random_range(0..trainer.num_samples())).collect();
        let r = trainer.step(&batch).map_err(|e| e.to_string())?;
        if r.loss > 0.0 {
            for (group, norm) in &r.grad_norms {
                ensure(*norm > 0.0 && norm.is_finite(), format!("step {step}: gradient norm of {group} is {norm}"))?;
                min_norm = min_norm.min(*norm);
            }
        }
    }
    ensure(sums(&pipeline) == before, "a frozen checksum changed")?;
    within(t0, Duration::from_secs(120))?;
    Ok(format!("backbone/text/vision checksums unchanged, smallest group grad norm {min_norm:.2e}, {:.1?}", t0.elapsed()))
}

fn tiny_frame(rng: &mut ChaCha8Rng) -> Frame {
    Frame::new(8, 8, (0..8 * 8 * 3).map(|_| rng.random()).collect())
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let unet = ToyUNet::<f64>::new(ToyUNetConfig { image_size: 8, ..Default::default() });
    let cond = Conditioner::<f64>::new(&TextEncoderConfig::default(), &VisionEncoderConfig { patch: 2, ..Default::default() });
    let pipeline = Pipeline::new(
        Arc::new(unet),
        Arc::new(cond),
        ConditionVariant::Orca,
        4,
        16,
        caption("reacher").map_err(|e| e.to_string())?,
        0,
        default_taps(),
        48,
    )
    .map_err(|e| e.to_string())?;
    let mut pc = PolicyConfig::new(2);
    pc.hidden_sizes = vec![32, 32];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut agent = Agent::new(&mut rng, &pipeline, &pc, 0).map_err(|e| e.to_string())?;
    let frames: Vec<Frame> = (0..3).map(|_| tiny_frame(&mut rng)).collect();
    let target = Tensor::from_f64(&[3, 2], &[0.5, -0.25, -1.0, 0.75, 0.1, 0.3]);
    let loss = |agent: &Agent<f64>, grad: bool| -> Result<(f64, Option<Tensor<f64>>), String> {
        let inputs: Vec<_> = frames.iter().map(|f| FrameInput { frame: f, cache: None }).collect();
        let mut g = Graph::new();
        let (pred, _) = agent.forward(&mut g, &pipeline, &inputs, None, &[0, 0, 0], true).map_err(|e| e.to_string())?;
        let l = loss_graph(&mut g, pred, &target, LossKind::Mse);
        let v = g.value(l).data()[0];
        let dg = grad.then(|| g.backward(l).param(&agent.bank.as_ref().expect("learned bank").task_tokens).cloned()).flatten();
        Ok((v, dg))
    };
    let (_, analytic) = loss(&agent, true)?;
    let analytic = analytic.ok_or("no gradient reached the task tokens")?;
    let n = analytic.numel();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..n);
        let mut probe = |delta: f64| -> Result<f64, String> {
            agent.bank.as_mut().expect("learned bank").task_tokens.value.data_mut()[i] += delta;
            let (v, _) = loss(&agent, false)?;
            agent.bank.as_mut().expect("learned bank").task_tokens.value.data_mut()[i] -= delta;
            Ok(v)
        };
        let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        ensure(rel <= 1e-4, format!("coordinate {i}: analytic {a:.6e}, numeric {numeric:.6e}, rel {rel:.2e}"))?;
        worst = worst.max(rel);
    }
    within(t0, Duration::from_secs(120))?;
    Ok(format!("20 coordinates of [{}x{}], max rel error {worst:.2e}, {:.1?}", analytic.shape()[0], analytic.shape()[1], t0.elapsed()))
}

fn attention_identities() -> Outcome {
    let t0 = Instant::now();
    let pipeline = Pipeline::<f64>::from_config(&RunConfig::default()).map_err(|e| e.to_string())?;
    let mut env = make_env(EnvId::PointReach);
    let frame = env.reset(4).frame;
    let bank = pipeline.new_bank(&mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?.expect("learned variant");
    let condition = pipeline.conditioner.encode_orca(&bank, &frame).map_err(|e| e.to_string())?;
    let blocks = pipeline.backend.descriptor().tap_points.clone();
    let opts = CaptureOptions { per_head: true, ..Default::default() };
    let cap = capture(pipeline.backend.as_ref(), &pipeline.schedule, &frame, 0, &condition, &blocks, &opts).map_err(|e| e.to_string())?;
    let mut row_err = 0.0f64;
    for b in &cap.blocks {
        row_err = row_err.max(b.max_row_sum_error());
    }
    ensure(row_err <= 1e-5, format!("softmax row sums off by {row_err:.2e}"))?;
    // softmax over the token records of one (block, head) at every location
    let l = condition.len();
    let mut raw_err = 0.0f64;
    for group in cap.records.chunks(1) {
        let r = &group[0];
        let peers: Vec<_> = cap.records.iter().filter(|p| p.block_id == r.block_id && p.head == r.head).collect();
        ensure(peers.len() == l, format!("{} records for {} tokens", peers.len(), l))?;
        for q in 0..r.map_raw.len() {
            let m = peers.iter().map(|p| p.map_raw[q]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = peers.iter().map(|p| (p.map_raw[q] - m).exp()).sum();
            let want = (r.map_raw[q] - m).exp() / z;
            raw_err = raw_err.max((want - r.map_norm[q]).abs());
        }
    }
    ensure(raw_err <= 1e-5, format!("softmax(map_raw) differs from map_norm by {raw_err:.2e}"))?;
    let null = pipeline.conditioner.encode_null().map_err(|e| e.to_string())?;
    let nc = capture(pipeline.backend.as_ref(), &pipeline.schedule, &frame, 0, &null, &blocks[3..4], &CaptureOptions::default())
        .map_err(|e| e.to_string())?;
    let labels: Vec<&str> = nc.records.iter().map(|r| r.token_label.as_str()).collect();
    ensure(labels == ["<bos>", "<eos>"], format!("null condition records {labels:?}"))?;
    within(t0, Duration::from_secs(30))?;
    Ok(format!(
        "{} records over {} blocks, row-sum error {row_err:.1e}, raw/norm error {raw_err:.1e}, null -> {labels:?}, {:.1?}",
        cap.records.len(),
        blocks.len(),
        t0.elapsed()
    ))
}

fn shape_ledger() -> Outcome {
    let cfg = RunConfig::default();
    let pipeline = Pipeline::<f32>::from_config(&cfg).map_err(|e| e.to_string())?;
    let d = pipeline.backend.descriptor();
    // stride-2 3x3 convolutions with padding 1 from 64 pixels
    let mut side = ToyUNetConfig::default().image_size;
    let mut want = 0;
    for tap in default_taps() {
        side = (side - 1) / 2 + 1;
        let (_, h, w) = d.tap_shape(&tap).ok_or(format!("no tap {tap}"))?;
        ensure((h, w) == (side, side), format!("{tap} is {h}x{w}, expected {side}x{side}"))?;
        want += 48 * h * w;
    }
    ensure(want == 65280, format!("hand-computed fused length {want}"))?;
    ensure(pipeline.fused_len() == want, format!("fused length {} vs {want}", pipeline.fused_len()))?;
    let l = cfg.condition.l_t + cfg.condition.l_v + 2;
    ensure(l == 22 && pipeline.condition_len() == l, format!("condition length {} vs {l}", pipeline.condition_len()))?;
    Ok(format!("fused length {} = 48·(32²+16²+8²+4²), condition length {}", pipeline.fused_len(), pipeline.condition_len()))
}

fn memorization() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let pipeline = Pipeline::<f32>::from_config(&cfg).map_err(|e| e.to_string())?;
    let mut env = make_env(EnvId::PointReach);
    let frame = env.reset(9).frame;
    let mut pc = PolicyConfig::from_run(&cfg, 2).map_err(|e| e.to_string())?;
    pc.batch_size = 1;
    let sample = Sample { frames: vec![0], proprio: vec![], action: vec![0.6f32, -0.4] };
    let mut trainer = Trainer::from_parts(&pipeline, vec![&frame], vec![sample], &pc, 0, 0).map_err(|e| e.to_string())?;
    let mut last = f64::INFINITY;
    for step in 0..200 {
        last = trainer.step(&[0]).map_err(|e| e.to_string())?.loss;
        if last < 1e-3 {
            within(t0, Duration::from_secs(60))?;
            return Ok(format!("bc_loss {last:.2e} after {} steps, {:.1?}", step + 1, t0.elapsed()));
        }
    }
    Err(format!("bc_loss still {last:.3e} after 200 steps"))
}

/// Seed means of the best normalized score per variant on point_reach.
fn ordering_check() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let weights = dir.path().join("toy_unet_pretrained.orca");
    let pre = generate_demos(EnvId::PointReach, 20, 1000).map_err(|e| e.to_string())?;
    let data = described_frames(&pre, &Conditioner::<f32>::default()).map_err(|e| e.to_string())?;
    let pairs: Vec<_> = data.iter().map(|(f, c)| (f, c)).collect();
    let mut unet = ToyUNet::<f32>::new(ToyUNetConfig::default());
    pretrain_denoiser(&mut unet, &NoiseSchedule::default(), &pairs, &PretrainConfig::default()).map_err(|e| e.to_string())?;
    unet.save_weights(&weights).map_err(|e| e.to_string())?;
    let ds = generate_demos(EnvId::PointReach, 5, 0).map_err(|e| e.to_string())?;
    let mut means = Vec::new();
    for variant in ["null", "task_only", "visual_only", "orca"] {
        let mut total = 0.0;
        for seed in 0..3u64 {
            let mut c = RunConfig::default();
            c.set("condition.variant", variant).map_err(|e| e.to_string())?;
            c.backbone.checkpoint_path = weights.display().to_string();
            c.run.seed = seed;
            total += run_experiment(&c, &ds, variant, |_, _| Ok(())).map_err(|e| e.to_string())?.result.best_metric;
        }
        means.push(total / 3.0);
    }
    let [null, task, visual, orca] = [means[0], means[1], means[2], means[3]];
    let line = format!("null {null:.4}, task_only {task:.4}, visual_only {visual:.4}, orca {orca:.4}, {:.0?}", t0.elapsed());
    let best_single = task.max(visual);
    let broken: Vec<&str> = [
        (orca >= best_single, "orca < max(task_only, visual_only)"),
        (best_single >= null - 0.02, "max(task_only, visual_only) < null - 0.02"),
        (orca - null >= 0.03, "orca - null < 0.03"),
    ]
    .iter()
    .filter(|c| !c.0)
    .map(|c| c.1)
    .collect();
    ensure(broken.is_empty(), format!("{}; {line}", broken.join(", ")))?;
    within(t0, Duration::from_secs(4 * 3600))?;
    Ok(line)
}

const SMALL_RUN: [&str; 10] =
    ["--policy.epochs", "1", "--eval.every", "1", "--eval.episodes", "2", "--policy.hidden_sizes", "[32]", "--policy.batch_size", "64"];

fn summary_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn ablation_fidelity() -> Outcome {
    let t0 = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tasks = "point_reach,two_link_reach,press_pad";
    let mut notes = Vec::new();
    for (axis, want) in [
        ("timesteps", vec!["200", "100", "0"]),
        ("layers", vec!["down_1", "down_2", "down_3", "mid", "up_0", "up_1", "up_2", "down_1-3+mid"]),
    ] {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let out = root.path().join(format!("{axis}{rep}"));
            let mut args = vec!["ablate", "--axis", axis, "--tasks", tasks, "--seeds", "0"];
            args.extend(SMALL_RUN);
            cli(&out, &args)?;
            outs.push(out);
        }
        let dirs: Vec<PathBuf> = outs.iter().map(|o| std::fs::read_dir(o.join("ablations")).unwrap().next().unwrap().unwrap().path()).collect();
        let rows = summary_rows(&String::from_utf8(read(&dirs[0].join("summary.csv"))?).map_err(|e| e.to_string())?);
        ensure(rows[0].len() == 5 && rows[0].last().map(String::as_str) == Some("mean"), format!("header {:?}", rows[0]))?;
        let labels: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
        ensure(labels == want, format!("{axis} rows {labels:?}"))?;
        for r in &rows[1..] {
            ensure(r[1..].iter().all(|c| !c.is_empty() && !c.contains("FAILED") && !c.contains("partial")), format!("row {r:?} not populated"))?;
        }
        let files = same_trees(&dirs[0], &dirs[1], |_| false)?;
        notes.push(format!("{axis}: {} rows x 3 tasks + mean, {files} files identical across reruns", labels.len()));
    }
    Ok(format!("{}; {:.0?}", notes.join("; "), t0.elapsed()))
}

fn reproducibility() -> Outcome {
    let t0 = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outs = Vec::new();
    for rep in 0..2 {
        let out = root.path().join(format!("rep{rep}"));
        let mut train = vec!["train", "--policy.epochs", "2", "--eval.every", "1", "--eval.episodes", "3"];
        train.extend(&SMALL_RUN[6..]);
        let mut viz = vec!["viz-attn", "--checkpoint", "e002", "--frames", "2", "--blocks", "down_3,mid", "--per-head"];
        viz.extend(&train[1..]);
        cli(&out, &["gen-demos"])?;
        cli(&out, &train)?;
        cli(&out, &viz)?;
        outs.push(out);
    }
    let files = tree(&outs[0]);
    for want in ["losses.json", "result.json", "grounding.json", ".orca", ".png"] {
        ensure(files.iter().any(|p| p.to_string_lossy().ends_with(want)), format!("no {want} artifact"))?;
    }
    let n = same_trees(&outs[0], &outs[1], |_| false)?;
    Ok(format!("{n} artifacts byte-identical (demo archive, losses, result, checkpoints, heatmaps), {:.0?}", t0.elapsed()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("noising oracle", noising_oracle),
        ("frozen-set exactness", frozen_set),
        ("gradient check", gradient_check),
        ("attention identities", attention_identities),
        ("shape ledger", shape_ledger),
        ("memorization oracle", memorization),
        ("desk-scale ordering", ordering_check),
        ("ablation harness fidelity", ablation_fidelity),
        ("reproducibility", reproducibility),
    ];
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
