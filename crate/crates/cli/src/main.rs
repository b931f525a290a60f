use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use conspolicy::config::{default_out_root, RunConfig};
use conspolicy::consistency::Which;
use conspolicy::data::Dataset;
use conspolicy::envs::{generate_offline_dataset, make_env, Env};
use conspolicy::gradcheck::{run_gradcheck, DEFAULT_NETWORKS};
use conspolicy::policy::Head;
use conspolicy::timing::timing_harness;
use conspolicy::trainers::{
    evaluate, load_models, select_model, train_bc, train_offline_ac, train_offline_to_online, train_online,
    RunIo, Streams, TrainOutcome,
};

#[derive(Parser, Debug)]
#[command(name = "conspolicy", version, about = "Consistency and diffusion policies for actor-critic RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an offline dataset from a scripted behavior policy.
    GenData(Common),
    /// Behavior cloning on an offline dataset.
    TrainBc(Common),
    /// Offline actor-critic training.
    TrainOffline(Common),
    /// Online fine-tuning from an offline checkpoint.
    TrainOff2on(Common),
    /// Online actor-critic training from scratch.
    TrainOnline(Common),
    /// Evaluate a checkpoint.
    Eval(Common),
    /// Time training and inference against the step count N.
    BenchTime(Common),
    /// Check reverse-mode gradients against finite differences.
    Gradcheck(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainBc(_) => "train-bc",
            Command::TrainOffline(_) => "train-offline",
            Command::TrainOff2on(_) => "train-off2on",
            Command::TrainOnline(_) => "train-online",
            Command::Eval(_) => "eval",
            Command::BenchTime(_) => "bench-time",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainBc(c)
            | Command::TrainOffline(c)
            | Command::TrainOff2on(c)
            | Command::TrainOnline(c)
            | Command::Eval(c)
            | Command::BenchTime(c)
            | Command::Gradcheck(c) => c,
        }
    }
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    n_inference: Option<usize>,
    /// Step counts for bench-time, comma separated.
    #[arg(long = "N", value_name = "LIST")]
    n_list: Option<String>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    /// Positive clip norm, or `none`.
    #[arg(long)]
    grad_clip: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    q_norm: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    max_q_backup: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    loss_scaling: Option<bool>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["offline", "online"])]
    selection: Option<String>,
    /// Behavior policy for gen-data.
    #[arg(long)]
    behavior: Option<String>,
    /// Number of transitions for gen-data.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    total_env_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut o: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        put("env", self.env.clone());
        put("head", self.head.clone());
        put("n_inference", self.n_inference.map(|v| v.to_string()));
        put("bench.n_list", self.n_list.clone());
        put("train.eta", self.eta.map(|v| v.to_string()));
        put("train.xi", self.xi.map(|v| v.to_string()));
        put("train.lr", self.lr.map(|v| v.to_string()));
        put("train.batch_size", self.batch_size.map(|v| v.to_string()));
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("train.iters_per_epoch", self.iters_per_epoch.map(|v| v.to_string()));
        put("train.grad_clip", self.grad_clip.clone());
        put("critic.q_norm", self.q_norm.map(|v| v.to_string()));
        put("critic.max_q_backup", self.max_q_backup.map(|v| v.to_string()));
        put("train.loss_scaling", self.loss_scaling.map(|v| v.to_string()));
        put("dataset", s(&self.dataset));
        put("checkpoint", s(&self.checkpoint));
        put("selection", self.selection.clone());
        put("data.behavior", self.behavior.clone());
        put("data.size", self.size.map(|v| v.to_string()));
        put("train.eval_episodes", self.episodes.map(|v| v.to_string()));
        put("online.total_env_steps", self.total_env_steps.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("out", s(&self.out));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            o.push((k.trim().to_string(), v.to_string()));
        }
        Ok(o)
    }
}

/// Defaults (with a per-command output directory), then the file, then flags.
fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = RunConfig {
        out: default_out_root().join(cmd.name()),
        ..RunConfig::default()
    };
    if let Some(f) = &common.config {
        cfg.apply_file(f)
            .with_context(|| format!("reading config {}", f.display()))?;
    }
    for (k, v) in common.overrides()? {
        cfg.set(&k, &v)?;
    }
    cfg.command = cmd.name().to_string();
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no {what} path given (use {flag})"),
        ))
        .context(format!("missing {what}")),
    }
}

fn load_dataset(cfg: &RunConfig, env: &Env) -> Result<Dataset> {
    let path = require(&cfg.dataset, "dataset", "--dataset")?;
    Dataset::load_for(path, env.obs_dim, env.act_dim).with_context(|| format!("loading dataset {}", path.display()))
}

fn finish_training(cfg: &RunConfig, out: &TrainOutcome) -> Result<()> {
    if out.checkpoints.is_empty() {
        return Ok(());
    }
    let idx = select_model(out.checkpoints.len(), cfg.selection, Some(&out.eval_history))?;
    let mut f = File::create(cfg.out.join("selected_checkpoint"))?;
    writeln!(f, "{}", out.checkpoints[idx].display())?;
    let last = out.metrics.last().map(|m| m.normalized_score).unwrap_or(f64::NAN);
    println!(
        "{}: {} checkpoints, final normalized score {last:.2}, selected {}",
        cfg.command,
        out.checkpoints.len(),
        out.checkpoints[idx].display()
    );
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    let cfg = resolve(&cmd)?;
    let t = &cfg.train;
    match cmd {
        Command::Gradcheck(_) => {
            cfg.echo()?;
            let r = run_gradcheck(t.seed, DEFAULT_NETWORKS)?;
            let mut f = File::create(cfg.out.join("gradcheck.csv"))?;
            writeln!(f, "network,variant,params,coordinates,max_rel_error")?;
            for (i, n) in r.networks.iter().enumerate() {
                writeln!(f, "{i},{},{},{},{}", n.spec.variant.name(), n.params, n.coordinates, n.max_rel_error)?;
            }
            println!("gradcheck: {} networks, worst relative error {:.3e}", r.networks.len(), r.worst());
            if !r.passed() {
                bail!("gradient check failed: worst relative error {:.3e} > {:e}", r.worst(), r.tolerance);
            }
        }
        Command::GenData(_) => {
            cfg.echo()?;
            let mut env = make_env(&cfg.env, t.seed)?;
            let d = generate_offline_dataset(&mut env, cfg.behavior, cfg.dataset_size, t.seed)?;
            let path = cfg.out.join("dataset.cprl");
            d.save(&path)?;
            println!("gen-data: {} transitions -> {}", d.len(), path.display());
        }
        Command::TrainBc(_) | Command::TrainOffline(_) => {
            let env = make_env(&cfg.env, t.seed)?;
            let data = load_dataset(&cfg, &env)?;
            cfg.echo()?;
            let io = RunIo {
                out_dir: Some(&cfg.out),
                eval_env: Some(&env),
            };
            let out = if matches!(cmd, Command::TrainBc(_)) {
                train_bc(&data, t, io)?
            } else {
                train_offline_ac(&data, t, io)?
            };
            finish_training(&cfg, &out)?;
        }
        Command::TrainOff2on(_) => {
            let mut env = make_env(&cfg.env, t.seed)?;
            let path = require(&cfg.checkpoint, "checkpoint", "--checkpoint")?;
            let (policy, critics) = load_models(t, env.obs_dim, env.act_dim, path, true)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            cfg.echo()?;
            let eval_env = env.clone();
            let io = RunIo {
                out_dir: Some(&cfg.out),
                eval_env: Some(&eval_env),
            };
            let out = train_offline_to_online(policy, critics.expect("critics requested"), &mut env, t, io)?;
            finish_training(&cfg, &out)?;
        }
        Command::TrainOnline(_) => {
            let mut env = make_env(&cfg.env, t.seed)?;
            cfg.echo()?;
            let eval_env = env.clone();
            let io = RunIo {
                out_dir: Some(&cfg.out),
                eval_env: Some(&eval_env),
            };
            let out = train_online(&mut env, t, io)?;
            finish_training(&cfg, &out)?;
        }
        Command::Eval(_) => {
            let env = make_env(&cfg.env, t.seed)?;
            let path = require(&cfg.checkpoint, "checkpoint", "--checkpoint")?;
            let (policy, _) = load_models(t, env.obs_dim, env.act_dim, path, false)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            cfg.echo()?;
            let grid = policy.grid(t.n_inference)?;
            let mut rng = Streams::new(t.seed).eval;
            let (ret, score) = evaluate(&env, t.eval_episodes, &mut rng, &mut |o, r| {
                policy.sample(Which::Online, o, grid.as_ref(), r)
            })?;
            let mut f = File::create(cfg.out.join("eval.csv"))?;
            writeln!(f, "checkpoint,episodes,mean_return,normalized_score")?;
            writeln!(f, "{},{},{ret},{score}", path.display(), t.eval_episodes)?;
            println!("eval: mean return {ret:.4}, normalized score {score:.2}");
        }
        Command::BenchTime(ref c) => {
            cfg.echo()?;
            let heads = if c.head.is_some() {
                vec![t.head]
            } else {
                vec![Head::Consistency, Head::Diffusion]
            };
            for head in heads {
                let r = timing_harness(head, t, &cfg.bench, &cfg.env, true)?;
                r.save(&cfg.out)?;
                println!(
                    "bench-time {}: inference slope {:.4} ms/step, train slope {:.4} s/step",
                    head.name(),
                    r.inference_fit.slope,
                    r.train_fit.slope
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
