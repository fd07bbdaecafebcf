//! `orca`: demonstrations, training, evaluation, ablations and attention
//! figures on the toy stack.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use orca_core::attnlab::{capture, emit_heatmaps, grounding_table, write_sidecar, CaptureOptions, DEFAULT_BLOCK};
use orca_core::backbone::{described_frames, pretrain_denoiser, Backend, PretrainConfig, ToyUNet, ToyUNetConfig};
use orca_core::conditioner::Conditioner;
use orca_core::config::RunConfig;
use orca_core::envkit::{generate_demos, load_dataset, make_env, rollout_expert, EnvId};
use orca_core::evalkit::{
    default_runner, eval_seed, evaluate_agent, run_ablation, run_experiment, AblationGrid, AblationJob, Axis,
};
use orca_core::pipeline::Pipeline;
use orca_core::policy::{load_agent, save_checkpoint, Agent, PolicyConfig};
use orca_core::{Error, Result};
use rand::SeedableRng;
use serde_json::json;

const CONFIG_HEADING: &str = "Config keys (flag wins over --config)";

fn config_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config").long("config").short('c').value_name("FILE").help("TOML run config"),
        Arg::new("overwrite").long("overwrite").action(ArgAction::SetTrue).help("Replace existing artifacts"),
    ];
    for (key, default) in RunConfig::default_keys() {
        args.push(
            Arg::new(key.clone())
                .long(key)
                .value_name("VALUE")
                .help(format!("[default: {default}]"))
                .help_heading(CONFIG_HEADING),
        );
    }
    args
}

fn cli() -> Command {
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(config_args());
    Command::new("orca")
        .about("Prompt-conditioned diffusion features for behavior cloning on a toy stack")
        .after_help("Exit codes: 0 success, 2 usage or config error, 3 data error, 4 training divergence, 5 partial ablation.\nORCA_OUT overrides run.out_dir.")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            sub("gen-demos", "Record scripted expert demonstrations")
                .arg(Arg::new("env").long("env").value_name("ENV").help("Shortcut for env.env_id"))
                .arg(Arg::new("n").long("n").value_name("N").help("Shortcut for env.demos (0 = per-task default)"))
                .arg(Arg::new("seed").long("seed").value_name("SEED").help("Shortcut for env.demo_seed"))
                .arg(Arg::new("out").long("out").value_name("FILE").help("Archive path [default: <out_dir>/datasets/...]")),
        )
        .subcommand(
            sub("pretrain", "Fit the toy denoiser on described expert frames")
                .arg(Arg::new("env").long("env").value_name("ENV").help("Shortcut for env.env_id"))
                .arg(Arg::new("episodes").long("episodes").value_name("N").default_value("20"))
                .arg(Arg::new("steps").long("steps").value_name("N").default_value("400"))
                .arg(Arg::new("batch-size").long("batch-size").value_name("N").default_value("8"))
                .arg(Arg::new("lr").long("lr").value_name("LR").default_value("0.001"))
                .arg(Arg::new("seed").long("seed").value_name("SEED").default_value("0"))
                .arg(Arg::new("out").long("out").value_name("FILE").help("Weights path [default: <out_dir>/backbones/...]")),
        )
        .subcommand(sub("train", "Train and periodically evaluate one run"))
        .subcommand(
            sub("eval", "Evaluate a checkpoint")
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("eNNN|FILE").required(true))
                .arg(Arg::new("episodes").long("episodes").value_name("N"))
                .arg(Arg::new("seed").long("seed").value_name("SEED").help("Episode seed [default: derived from run.seed]")),
        )
        .subcommand(
            sub("ablate", "Run an ablation grid")
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .value_name("AXIS")
                        .required(true)
                        .value_parser(["components", "layers", "timesteps", "variants"]),
                )
                .arg(Arg::new("tasks").long("tasks").value_name("LIST").default_value("point_reach,two_link_reach,press_pad"))
                .arg(Arg::new("seeds").long("seeds").value_name("LIST").default_value("0,1,2"))
                .arg(Arg::new("workers").long("workers").value_name("N").default_value("1")),
        )
        .subcommand(
            sub("viz-attn", "Write cross-attention heatmaps for expert frames")
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("eNNN|FILE"))
                .arg(Arg::new("frames").long("frames").value_name("N").default_value("3"))
                .arg(Arg::new("blocks").long("blocks").value_name("LIST").default_value(DEFAULT_BLOCK))
                .arg(Arg::new("per-head").long("per-head").action(ArgAction::SetTrue).help("One record per head instead of the head mean"))
                .arg(Arg::new("episode-seed").long("episode-seed").value_name("SEED").default_value("0")),
        )
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Lookup { .. } | Error::Range(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Generation(_) => 3,
        Error::Divergence { .. } => 4,
        Error::Aggregation(_) => 5,
        Error::Protocol(_) => 1,
    }
}

fn main() -> ExitCode {
    let m = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = m.subcommand().expect("subcommand required");
    let out = config_from(sub).and_then(|cfg| match name {
        "gen-demos" => cmd_gen_demos(cfg, sub),
        "pretrain" => cmd_pretrain(cfg, sub),
        "train" => cmd_train(cfg, sub),
        "eval" => cmd_eval(cfg, sub),
        "ablate" => cmd_ablate(cfg, sub),
        "viz-attn" => cmd_viz_attn(cfg, sub),
        _ => unreachable!("clap knows the subcommands"),
    });
    match out {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config_from(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (key, _) in RunConfig::default_keys() {
        if let Some(v) = m.get_one::<String>(&key) {
            cfg.set(&key, v)?;
        }
    }
    Ok(cfg)
}

fn parse<T: std::str::FromStr>(m: &ArgMatches, name: &str) -> Result<Option<T>> {
    m.get_one::<String>(name)
        .map(|s| s.parse::<T>().map_err(|_| Error::Config(format!("--{name}: cannot parse `{s}`"))))
        .transpose()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| Error::Config(format!("--{what}: cannot parse `{p}`"))))
        .collect()
}

fn overwrite(m: &ArgMatches) -> bool {
    m.get_flag("overwrite")
}

fn mkdirs(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(d) = p.parent() {
        mkdirs(d)?;
    }
    std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

fn json_line(v: serde_json::Value) -> String {
    serde_json::to_string(&v).expect("json serializes") + "\n"
}

fn cmd_gen_demos(mut cfg: RunConfig, m: &ArgMatches) -> Result<u8> {
    if let Some(e) = m.get_one::<String>("env") {
        cfg.set("env.env_id", e)?;
    }
    if let Some(n) = m.get_one::<String>("n") {
        cfg.set("env.demos", n)?;
    }
    if let Some(s) = m.get_one::<String>("seed") {
        cfg.set("env.demo_seed", s)?;
    }
    let path = m.get_one::<String>("out").map_or_else(|| cfg.dataset_path(), PathBuf::from);
    let ds = generate_demos(cfg.env.env_id, cfg.demos(), cfg.env.demo_seed)?;
    let bytes = ds.to_archive().to_bytes();
    match std::fs::read(&path) {
        Ok(old) if old == bytes => {}
        Ok(_) if !overwrite(m) => {
            return Err(Error::Config(format!("{} exists with different content; pass --overwrite", path.display())));
        }
        _ => write(&path, &bytes)?,
    }
    println!(
        "{}: {} episodes, {} steps, {} rejected -> {}",
        ds.env_id,
        ds.episodes.len(),
        ds.num_steps(),
        ds.rejected,
        path.display()
    );
    Ok(0)
}

fn cmd_pretrain(mut cfg: RunConfig, m: &ArgMatches) -> Result<u8> {
    if let Some(e) = m.get_one::<String>("env") {
        cfg.set("env.env_id", e)?;
    }
    let episodes: usize = parse(m, "episodes")?.expect("has default");
    let pc = PretrainConfig {
        steps: parse(m, "steps")?.expect("has default"),
        batch_size: parse(m, "batch-size")?.expect("has default"),
        lr: parse(m, "lr")?.expect("has default"),
        seed: parse(m, "seed")?.expect("has default"),
        ..Default::default()
    };
    let env = cfg.env.env_id;
    let path = m.get_one::<String>("out").map_or_else(
        || cfg.out_dir().join("backbones").join(format!("toy_unet_{env}_e{episodes}_s{}_seed{}.orca", pc.steps, pc.seed)),
        PathBuf::from,
    );
    if path.exists() && !overwrite(m) {
        return Err(Error::Config(format!("{} exists; pass --overwrite", path.display())));
    }
    // a demo set disjoint from the training demos of the default seeds
    let ds = generate_demos(env, episodes, pc.seed ^ 0x0050_7e7a_1000_0000)?;
    let data = described_frames(&ds, &Conditioner::<f32>::default())?;
    let pairs: Vec<_> = data.iter().map(|(f, c)| (f, c)).collect();
    let mut unet = ToyUNet::<f32>::new(ToyUNetConfig::default());
    let losses = pretrain_denoiser(&mut unet, &Default::default(), &pairs, &pc)?;
    if let Some(d) = path.parent() {
        mkdirs(d)?;
    }
    unet.save_weights(&path)?;
    let tail = &losses[losses.len().saturating_sub(10)..];
    println!(
        "pretrained on {} frames, final loss {:.4} -> {}",
        pairs.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        path.display()
    );
    Ok(0)
}

fn run_manifest(cfg: &RunConfig) -> serde_json::Value {
    json!({
        "config_hash": cfg.hash(),
        "config": cfg.to_toml(),
        "backend_id": cfg.backbone.backend_id,
    })
}

fn cmd_train(cfg: RunConfig, m: &ArgMatches) -> Result<u8> {
    let dir = cfg.run_dir();
    if dir.join("result.json").exists() && !overwrite(m) {
        return Err(Error::Config(format!("run {} already exists; pass --overwrite", dir.display())));
    }
    let ds_path = cfg.dataset_path();
    if !ds_path.exists() {
        return Err(Error::Data(format!("missing dataset {}; run gen-demos first", ds_path.display())));
    }
    let ds = load_dataset(&ds_path)?;
    mkdirs(&dir.join("checkpoints"))?;
    write(&dir.join("config.toml"), cfg.to_toml())?;
    let hash = cfg.hash();
    let mut evals = String::new();
    eprintln!("run {hash}: {} on {} ({} steps of data)", cfg.condition.variant, cfg.env.env_id, ds.num_steps());
    let res = run_experiment(&cfg, &ds, cfg.condition.variant.as_str(), |st, out| {
        let mut man = run_manifest(&cfg);
        man["metric"] = json!(out.metric);
        save_checkpoint(st, man, dir.join("checkpoints").join(format!("e{:03}.orca", st.epoch)))?;
        evals.push_str(&json_line(json!({
            "config_hash": hash,
            "epoch": st.epoch,
            "metric": out.metric,
            "metric_kind": out.metric_kind,
            "episode_metrics": out.episode_metrics,
        })));
        write(&dir.join("evals.jsonl"), &evals)?;
        eprintln!("epoch {:3}  loss {:.5}  {} {:.4}", st.epoch, st.losses.last().copied().unwrap_or(f64::NAN), out.metric_kind.as_str(), out.metric);
        Ok(())
    });
    let exp = match res {
        Ok(e) => e,
        Err(e @ Error::Divergence { .. }) => {
            let diag = json!({"config_hash": hash, "error": e.to_string()});
            write(&dir.join("divergence.json"), serde_json::to_vec_pretty(&diag).expect("json serializes"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    write(&dir.join("losses.json"), serde_json::to_vec(&exp.state.losses).expect("json serializes"))?;
    let mut rec = serde_json::to_value(&exp.result).expect("record serializes");
    rec["config_hash"] = json!(hash);
    write(&dir.join("result.json"), serde_json::to_vec_pretty(&rec).expect("json serializes"))?;
    println!("best {} {:.4} -> {}", exp.result.metric_kind.as_str(), exp.result.best_metric, dir.display());
    Ok(0)
}

fn checkpoint_path(cfg: &RunConfig, spec: &str) -> PathBuf {
    match spec.strip_prefix('e').and_then(|n| n.parse::<usize>().ok()) {
        Some(epoch) if !spec.contains('.') && !spec.contains('/') => {
            cfg.run_dir().join("checkpoints").join(format!("e{epoch:03}.orca"))
        }
        _ => PathBuf::from(spec),
    }
}

/// The config stored in a checkpoint, or `cfg` when there is none.
fn checkpoint_config(cfg: &RunConfig, path: &Path) -> Result<RunConfig> {
    let a = orca_core::archive::Archive::load(path)?;
    match a.manifest["config"].as_str() {
        Some(t) => RunConfig::from_toml(t),
        None => Ok(cfg.clone()),
    }
}

fn cmd_eval(cfg: RunConfig, m: &ArgMatches) -> Result<u8> {
    let path = checkpoint_path(&cfg, m.get_one::<String>("checkpoint").expect("required"));
    let run_cfg = checkpoint_config(&cfg, &path)?;
    let pipeline = Pipeline::<f32>::from_config(&run_cfg)?;
    let spec = make_env(run_cfg.env.env_id).spec().clone();
    let pc = PolicyConfig::from_run(&run_cfg, spec.action_dim)?;
    let ck = load_agent(&path, &pipeline, &pc)?;
    let episodes = parse(m, "episodes")?.unwrap_or(cfg.eval.episodes);
    let seed = parse(m, "seed")?.unwrap_or_else(|| eval_seed(run_cfg.run.seed));
    let out = evaluate_agent(&pipeline, &ck.agent, run_cfg.env.env_id, episodes, seed)?;
    println!(
        "{}",
        json!({
            "config_hash": run_cfg.hash(),
            "checkpoint": path.display().to_string(),
            "epoch": ck.manifest["epoch"],
            "env_id": run_cfg.env.env_id,
            "metric_kind": out.metric_kind,
            "metric": out.metric,
            "episodes": episodes,
            "seed": seed,
        })
    );
    Ok(0)
}

fn cmd_ablate(cfg: RunConfig, m: &ArgMatches) -> Result<u8> {
    let axis: Axis = m.get_one::<String>("axis").expect("required").parse()?;
    let tasks: Vec<EnvId> = parse_list(m.get_one::<String>("tasks").expect("has default"), "tasks")?;
    let seeds: Vec<u64> = parse_list(m.get_one::<String>("seeds").expect("has default"), "seeds")?;
    let workers: usize = parse(m, "workers")?.expect("has default");
    let dir = cfg.out_dir().join("ablations").join(format!("{axis}_{}", cfg.hash()));
    if dir.join("summary.csv").exists() && !overwrite(m) {
        return Err(Error::Config(format!("ablation {} already exists; pass --overwrite", dir.display())));
    }
    mkdirs(&dir)?;
    let manifest = json!({"config_hash": cfg.hash(), "axis": axis.as_str(), "tasks": tasks, "seeds": seeds, "config": cfg.to_toml()});
    write(&dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest).expect("json serializes"))?;
    let grid = AblationGrid::new(axis, cfg);
    let runner = |job: &AblationJob| {
        eprintln!("start {} / {} / seed {}", job.label, job.env_id, job.seed);
        let r = default_runner(job);
        match &r {
            Ok(r) => eprintln!("done  {} / {} / seed {}: {:.4}", job.label, job.env_id, job.seed, r.best_metric),
            Err(e) => eprintln!("FAIL  {} / {} / seed {}: {e}", job.label, job.env_id, job.seed),
        }
        r
    };
    let report = run_ablation(&grid, &tasks, &seeds, workers, &dir, &runner)?;
    print!("{}", report.summary_text());
    println!("-> {}", dir.display());
    Ok(if report.is_partial() { 5 } else { 0 })
}

fn cmd_viz_attn(cfg: RunConfig, m: &ArgMatches) -> Result<u8> {
    let (run_cfg, agent_src) = match m.get_one::<String>("checkpoint") {
        Some(s) => {
            let p = checkpoint_path(&cfg, s);
            (checkpoint_config(&cfg, &p)?, Some(p))
        }
        None => (cfg, None),
    };
    let pipeline = Pipeline::<f32>::from_config(&run_cfg)?;
    let env_id = run_cfg.env.env_id;
    let spec = make_env(env_id).spec().clone();
    let pc = PolicyConfig::from_run(&run_cfg, spec.action_dim)?;
    let (agent, tag) = match &agent_src {
        Some(p) => {
            let ck = load_agent(p, &pipeline, &pc)?;
            (ck.agent, p.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned()))
        }
        None => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(run_cfg.run.seed);
            (Agent::new(&mut rng, &pipeline, &pc, spec.proprio_dim)?, "init".to_string())
        }
    };
    let n_frames: usize = parse(m, "frames")?.expect("has default");
    let blocks: Vec<String> = parse_list(m.get_one::<String>("blocks").expect("has default"), "blocks")?;
    let ep_seed: u64 = parse(m, "episode-seed")?.expect("has default");
    let mut env = make_env(env_id);
    let ep = rollout_expert(env.as_mut(), ep_seed)?;
    if n_frames == 0 || n_frames > ep.len() {
        return Err(Error::Config(format!("--frames must be in 1..={}", ep.len())));
    }
    let picks: Vec<usize> = (0..n_frames).map(|i| if n_frames == 1 { 0 } else { i * (ep.len() - 1) / (n_frames - 1) }).collect();
    let opts = CaptureOptions { per_head: m.get_flag("per-head"), timestep: run_cfg.backbone.timestep, noise_seed: run_cfg.run.seed };
    let mut records = Vec::new();
    let mut masks = Vec::new();
    let mut frames = Vec::new();
    for (i, &t) in picks.iter().enumerate() {
        let frame = &ep.observations[t];
        let cond = pipeline.conditioner.encode(&pipeline.layout, agent.bank.as_ref(), Some(frame))?;
        records.extend(capture(pipeline.backend.as_ref() as &dyn Backend<f32>, &pipeline.schedule, frame, i, &cond, &blocks, &opts)?.records);
        let state: Vec<f64> = ep.states[t].iter().map(|&v| f64::from(v)).collect();
        env.set_state(&state)?;
        masks.push(env.masks());
        frames.push(frame);
    }
    let dir = run_cfg.run_dir().join("viz").join(&tag);
    if dir.exists() && !overwrite(m) {
        return Err(Error::Config(format!("{} already exists; pass --overwrite", dir.display())));
    }
    let files = emit_heatmaps(&records, &frames, &dir, env_id.as_str(), run_cfg.condition.variant.as_str())?;
    let table = grounding_table(&records, &masks)?;
    write_sidecar(dir.join("grounding.json"), &table)?;
    write(
        &dir.join("manifest.json"),
        serde_json::to_vec_pretty(&json!({"config_hash": run_cfg.hash(), "frames": picks, "blocks": blocks, "episode_seed": ep_seed}))
            .expect("json serializes"),
    )?;
    println!("{} figures -> {}", files.len(), dir.display());
    Ok(0)
}
