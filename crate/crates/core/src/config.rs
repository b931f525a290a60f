//! Flat `key=value` run configuration with dotted namespaces.
//!
//! Resolution order is defaults, then a config file, then explicit overrides.
//! [`RunConfig::to_text`] echoes every key so a resolved file reproduces a run.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::consistency::IndexSampling;
use crate::critic::PolicyQ;
use crate::envs::Behavior;
use crate::error::{Error, Result};
use crate::nn::{Activation, Variant};
use crate::optim::LrDecay;
use crate::policy::Head;
use crate::trainers::{SelectionMode, TrainConfig};

/// Name of the echoed configuration inside the output directory.
pub const RESOLVED_NAME: &str = "config_resolved";
/// Environment variable holding the default output root.
pub const OUT_ENV_VAR: &str = "CONSPOLICY_OUT";
/// Step counts of the timing comparison.
pub const BENCH_STEPS: [usize; 6] = [1, 2, 5, 10, 20, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub samples: usize,
    pub warmup: usize,
    pub train_epochs: usize,
    pub train_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_list: BENCH_STEPS.to_vec(),
            samples: 1000,
            warmup: 100,
            train_epochs: 3,
            train_iters: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub env: String,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub selection: SelectionMode,
    pub behavior: Behavior,
    pub dataset_size: usize,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            env: "two_mode_bandit".into(),
            out: default_out_root(),
            dataset: None,
            checkpoint: None,
            selection: SelectionMode::OfflineLastCheckpoint,
            behavior: Behavior::MixtureExpert,
            dataset_size: 10_000,
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// `$CONSPOLICY_OUT` when set, else `runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    let v = v.trim();
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

fn lr_decay_name(d: LrDecay) -> &'static str {
    match d {
        LrDecay::Constant => "constant",
        LrDecay::CosineAnnealing => "cosine",
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "command" => self.command = v.to_string(),
            "env" => self.env = v.to_string(),
            "out" => self.out = PathBuf::from(v),
            "dataset" => self.dataset = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "selection" => self.selection = SelectionMode::parse(v)?,
            "data.behavior" => self.behavior = Behavior::parse(v)?,
            "data.size" => self.dataset_size = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "head" => t.head = Head::parse(v)?,
            "n_inference" => t.n_inference = num(key, v)?,
            "train.eta" => t.eta = num(key, v)?,
            "train.xi" => t.xi = num(key, v)?,
            "train.loss_scaling" => t.loss_scaling = flag(key, v)?,
            "train.lr" => t.learning_rate = num(key, v)?,
            "train.lr_decay" => {
                t.lr_decay = match v {
                    "constant" => LrDecay::Constant,
                    "cosine" => LrDecay::CosineAnnealing,
                    _ => return Err(Error::Config(format!("`{key}`: unknown decay `{v}`"))),
                }
            }
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.iters_per_epoch" => t.iters_per_epoch = num(key, v)?,
            "train.grad_clip" => t.grad_clip = if v == "none" { None } else { Some(num(key, v)?) },
            "train.eval_episodes" => t.eval_episodes = num(key, v)?,
            "train.curriculum_reset_per_epoch" => t.curriculum_reset_per_epoch = flag(key, v)?,
            "train.index_sampling" => {
                t.index_sampling = match v {
                    "per_sample" => IndexSampling::PerSample,
                    "shared" => IndexSampling::Shared,
                    _ => return Err(Error::Config(format!("`{key}`: unknown mode `{v}`"))),
                }
            }
            "policy.hidden" => t.policy_hidden = list(key, v)?,
            "policy.activation" => t.policy_activation = Activation::parse(v)?,
            "policy.variant" => t.policy_variant = Variant::parse(v)?,
            "policy.ema" => t.policy_ema = num(key, v)?,
            "critic.hidden" => t.critic_hidden = list(key, v)?,
            "critic.activation" => t.critic_activation = Activation::parse(v)?,
            "critic.ema" => t.critic_ema = num(key, v)?,
            "critic.gamma" => t.gamma = num(key, v)?,
            "critic.q_norm" => t.q_norm = flag(key, v)?,
            "critic.max_q_backup" => t.max_q_backup = flag(key, v)?,
            "critic.backup_samples" => t.backup_samples = num(key, v)?,
            "critic.policy_q" => {
                t.policy_q = match v {
                    "q1" => PolicyQ::First,
                    "random" => PolicyQ::RandomPerBatch,
                    _ => return Err(Error::Config(format!("`{key}`: expected q1 or random, got `{v}`"))),
                }
            }
            "critic.q_abs_norm" => t.q_abs_norm = flag(key, v)?,
            "denoise.epsilon" => t.denoise.epsilon = num(key, v)?,
            "denoise.horizon" => t.denoise.horizon = num(key, v)?,
            "denoise.rho" => t.denoise.rho = num(key, v)?,
            "denoise.s0" => t.denoise.s0 = num(key, v)?,
            "denoise.s1" => t.denoise.s1 = num(key, v)?,
            "online.lr" => t.online_learning_rate = num(key, v)?,
            "online.bc_weight" => t.online_bc_weight = num(key, v)?,
            "online.buffer" => t.buffer_capacity = num(key, v)?,
            "online.total_env_steps" => t.total_env_steps = num(key, v)?,
            "online.eps0" => t.exploration.eps0 = num(key, v)?,
            "online.eps_inf" => t.exploration.eps_inf = num(key, v)?,
            "online.fraction" => t.exploration.fraction = num(key, v)?,
            "online.metrics_every" => t.metrics_every = num(key, v)?,
            "bench.n_list" => self.bench.n_list = list(key, v)?,
            "bench.samples" => self.bench.samples = num(key, v)?,
            "bench.warmup" => self.bench.warmup = num(key, v)?,
            "bench.train_epochs" => self.bench.train_epochs = num(key, v)?,
            "bench.train_iters" => self.bench.train_iters = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let b = |x: bool| x.to_string();
        vec![
            ("command", self.command.clone()),
            ("env", self.env.clone()),
            ("out", self.out.display().to_string()),
            ("dataset", show_path(&self.dataset)),
            ("checkpoint", show_path(&self.checkpoint)),
            (
                "selection",
                match self.selection {
                    SelectionMode::OfflineLastCheckpoint => "offline",
                    SelectionMode::OnlineBestEval => "online",
                }
                .into(),
            ),
            ("data.behavior", self.behavior.name().into()),
            ("data.size", self.dataset_size.to_string()),
            ("seed", t.seed.to_string()),
            ("head", t.head.name().into()),
            ("n_inference", t.n_inference.to_string()),
            ("train.eta", t.eta.to_string()),
            ("train.xi", t.xi.to_string()),
            ("train.loss_scaling", b(t.loss_scaling)),
            ("train.lr", t.learning_rate.to_string()),
            ("train.lr_decay", lr_decay_name(t.lr_decay).into()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.iters_per_epoch", t.iters_per_epoch.to_string()),
            ("train.grad_clip", t.grad_clip.map_or_else(|| "none".into(), |c| c.to_string())),
            ("train.eval_episodes", t.eval_episodes.to_string()),
            ("train.curriculum_reset_per_epoch", b(t.curriculum_reset_per_epoch)),
            (
                "train.index_sampling",
                match t.index_sampling {
                    IndexSampling::PerSample => "per_sample",
                    IndexSampling::Shared => "shared",
                }
                .into(),
            ),
            ("policy.hidden", join(&t.policy_hidden)),
            ("policy.activation", t.policy_activation.name().into()),
            ("policy.variant", t.policy_variant.name().into()),
            ("policy.ema", t.policy_ema.to_string()),
            ("critic.hidden", join(&t.critic_hidden)),
            ("critic.activation", t.critic_activation.name().into()),
            ("critic.ema", t.critic_ema.to_string()),
            ("critic.gamma", t.gamma.to_string()),
            ("critic.q_norm", b(t.q_norm)),
            ("critic.max_q_backup", b(t.max_q_backup)),
            ("critic.backup_samples", t.backup_samples.to_string()),
            (
                "critic.policy_q",
                match t.policy_q {
                    PolicyQ::First => "q1",
                    PolicyQ::RandomPerBatch => "random",
                }
                .into(),
            ),
            ("critic.q_abs_norm", b(t.q_abs_norm)),
            ("denoise.epsilon", t.denoise.epsilon.to_string()),
            ("denoise.horizon", t.denoise.horizon.to_string()),
            ("denoise.rho", t.denoise.rho.to_string()),
            ("denoise.s0", t.denoise.s0.to_string()),
            ("denoise.s1", t.denoise.s1.to_string()),
            ("online.lr", t.online_learning_rate.to_string()),
            ("online.bc_weight", t.online_bc_weight.to_string()),
            ("online.buffer", t.buffer_capacity.to_string()),
            ("online.total_env_steps", t.total_env_steps.to_string()),
            ("online.eps0", t.exploration.eps0.to_string()),
            ("online.eps_inf", t.exploration.eps_inf.to_string()),
            ("online.fraction", t.exploration.fraction.to_string()),
            ("online.metrics_every", t.metrics_every.to_string()),
            ("bench.n_list", join(&self.bench.n_list)),
            ("bench.samples", self.bench.samples.to_string()),
            ("bench.warmup", self.bench.warmup.to_string()),
            ("bench.train_epochs", self.bench.train_epochs.to_string()),
            ("bench.train_iters", self.bench.train_iters.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Defaults, then an optional file, then overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(f) = file {
            c.apply_file(f)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Writes the resolved configuration into the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let p = self.out.join(RESOLVED_NAME);
        std::fs::write(&p, self.to_text())?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let mut c = RunConfig::default();
        c.train.eta = 0.1 + 0.2;
        c.train.grad_clip = None;
        c.train.policy_hidden = vec![7, 3];
        c.dataset = Some("d.cprl".into());
        c.train.policy_q = PolicyQ::RandomPerBatch;
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn every_key_is_settable() {
        let c = RunConfig::default();
        let mut d = RunConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
    }

    #[test]
    fn overrides_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("cfg");
        std::fs::write(&f, "# comment\ntrain.lr=0.01\ntrain.eta=2\n\ndenoise.rho=5\n").unwrap();
        let c = RunConfig::resolve(Some(&f), &[("train.eta".into(), "3".into())]).unwrap();
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.eta, 3.0);
        assert_eq!(c.train.denoise.rho, 5.0);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bad_input_is_config_error() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("train.lr", "fast"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("novalue"), Err(Error::Config(_))));
        assert!(matches!(c.set("critic.q_norm", "maybe"), Err(Error::Config(_))));
    }

    #[test]
    fn bench_defaults_cover_the_step_counts() {
        assert_eq!(BenchConfig::default().n_list, vec![1, 2, 5, 10, 20, 50]);
        assert!(BenchConfig::default().samples >= 1000);
    }
}
