//! Training loops: consistency BC, offline actor-critic, offline-to-online and
//! online, plus evaluation and checkpoint selection.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::{checkpoint_name, Checkpoint};
use crate::consistency::{ConsistencyPolicy, IndexSampling, LossScaler, Which};
use crate::critic::{CriticIndex, CriticPair, PolicyQ};
use crate::data::{Batch, Dataset, ReplayBuffer, Transition};
use crate::diffusion::DiffusionPolicy;
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpSpec, Variant};
use crate::optim::{Adam, LrDecay};
use crate::policy::{GaussianPolicy, Head, Policy};
use crate::schedules::{
    curriculum_n, epsilon_greedy, karras_grid, CurriculumState, DenoiseConstants, ExplorationSchedule,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub head: Head,
    pub eta: f64,
    pub xi: f64,
    pub loss_scaling: bool,
    pub learning_rate: f64,
    pub lr_decay: LrDecay,
    pub batch_size: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub grad_clip: Option<f64>,
    /// Inference steps; also the diffusion head's N.
    pub n_inference: usize,
    pub seed: u64,
    pub eval_episodes: usize,
    pub denoise: DenoiseConstants,
    pub curriculum_reset_per_epoch: bool,
    pub index_sampling: IndexSampling,
    pub policy_hidden: Vec<usize>,
    pub policy_activation: Activation,
    pub policy_variant: Variant,
    pub critic_hidden: Vec<usize>,
    pub critic_activation: Activation,
    pub policy_ema: f64,
    pub critic_ema: f64,
    pub gamma: f64,
    pub q_norm: bool,
    pub max_q_backup: bool,
    pub backup_samples: usize,
    pub policy_q: PolicyQ,
    /// Divide L_q by the detached batch mean of |Q|.
    pub q_abs_norm: bool,
    // online
    pub online_learning_rate: f64,
    pub online_bc_weight: f64,
    pub buffer_capacity: usize,
    pub total_env_steps: usize,
    pub exploration: ExplorationSchedule,
    pub metrics_every: usize,
    /// Keep an in-memory call log (critic/policy/target order).
    pub record_calls: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head: Head::Consistency,
            eta: 1.0,
            xi: 1.0,
            loss_scaling: true,
            learning_rate: 3e-4,
            lr_decay: LrDecay::CosineAnnealing,
            batch_size: 256,
            epochs: 10,
            iters_per_epoch: 1000,
            grad_clip: Some(9.0),
            n_inference: 2,
            seed: 0,
            eval_episodes: 10,
            denoise: DenoiseConstants::default(),
            curriculum_reset_per_epoch: true,
            index_sampling: IndexSampling::PerSample,
            policy_hidden: vec![256, 256, 256],
            policy_activation: Activation::Mish,
            policy_variant: Variant::PlainMlp,
            critic_hidden: vec![256, 256, 256],
            critic_activation: Activation::Mish,
            policy_ema: 0.995,
            critic_ema: 0.995,
            gamma: 0.99,
            q_norm: false,
            max_q_backup: false,
            backup_samples: 10,
            policy_q: PolicyQ::First,
            q_abs_norm: false,
            online_learning_rate: 1e-5,
            online_bc_weight: 0.0,
            buffer_capacity: 100_000,
            total_env_steps: 1_000_000,
            exploration: ExplorationSchedule::default(),
            metrics_every: 1000,
            record_calls: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta must be nonnegative");
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return bad("xi must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.online_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.iters_per_epoch == 0 {
            return bad("batch size, epochs and iterations per epoch must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad clip must be positive");
            }
        }
        if self.n_inference == 0 {
            return bad("n_inference must be positive");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.backup_samples == 0 || self.buffer_capacity == 0 || self.metrics_every == 0 {
            return bad("backup samples, buffer capacity and metrics interval must be positive");
        }
        if !(self.online_bc_weight >= 0.0) {
            return bad("online_bc_weight must be nonnegative");
        }
        self.denoise.validate()?;
        self.exploration.validate()
    }

    pub fn scaler(&self) -> LossScaler {
        if self.loss_scaling {
            LossScaler::StepGap { xi: self.xi }
        } else {
            LossScaler::Unit
        }
    }

    pub fn policy_spec(&self) -> MlpSpec {
        MlpSpec::new(0, self.policy_hidden.clone(), 0)
            .with_activation(self.policy_activation)
            .with_variant(self.policy_variant)
    }

    pub fn critic_spec(&self) -> MlpSpec {
        MlpSpec::new(0, self.critic_hidden.clone(), 1).with_activation(self.critic_activation)
    }
}

/// Independent random streams, one per consumer, so that adding a component
/// (for instance critic updates) never shifts another component's draws.
#[derive(Clone, Debug)]
pub struct Streams {
    pub policy_init: ChaCha8Rng,
    pub critic_init: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub critic: ChaCha8Rng,
    pub env: ChaCha8Rng,
    pub explore: ChaCha8Rng,
    pub eval: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let s = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams {
            policy_init: s(1),
            critic_init: s(2),
            data: s(3),
            policy: s(4),
            critic: s(5),
            env: s(6),
            explore: s(7),
            eval: s(8),
        }
    }
}

pub fn build_policy(cfg: &TrainConfig, state_dim: usize, action_dim: usize, rng: &mut ChaCha8Rng) -> Result<Policy> {
    Ok(match cfg.head {
        Head::Consistency => {
            let mut p = ConsistencyPolicy::new(state_dim, action_dim, cfg.policy_spec(), cfg.denoise, rng)?;
            p.ema_alpha = cfg.policy_ema;
            p.index_sampling = cfg.index_sampling;
            Policy::Consistency(p)
        }
        Head::Diffusion => {
            let mut p = DiffusionPolicy::new(state_dim, action_dim, cfg.policy_spec(), cfg.n_inference, rng)?;
            p.ema_alpha = cfg.policy_ema;
            Policy::Diffusion(p)
        }
    })
}

pub fn build_critics(cfg: &TrainConfig, state_dim: usize, action_dim: usize, rng: &mut ChaCha8Rng) -> Result<CriticPair> {
    let mut c = CriticPair::new(state_dim, action_dim, cfg.critic_spec(), rng)?;
    c.ema_alpha = cfg.critic_ema;
    c.gamma = cfg.gamma;
    c.q_norm = cfg.q_norm;
    c.max_q_backup = cfg.max_q_backup;
    c.backup_samples = cfg.backup_samples;
    c.policy_q = cfg.policy_q;
    c.validate()?;
    Ok(c)
}

/// Loss components of one policy update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyLoss {
    pub lc: f64,
    pub lq: f64,
    pub total: f64,
}

/// Critic handle for the Q term of the policy objective.
pub struct QTerm<'a> {
    pub critics: &'a CriticPair,
    pub which: CriticIndex,
    pub eta: f64,
}

/// `w_c·L_c + η·L_q` with `L_q = −mean Q(s, π_θ(s))`, where the actions are
/// drawn by the online policy on the inference grid and the gradient runs
/// back through every sampler evaluation. Terms with zero weight are skipped
/// entirely, including their random draws.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss(
    policy: &Policy,
    q: Option<QTerm<'_>>,
    batch: &Batch,
    train_n: usize,
    cfg: &TrainConfig,
    lc_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyLoss, Vec<Vec<f64>>)> {
    let q = q.filter(|t| t.eta > 0.0);
    if lc_weight == 0.0 && q.is_none() {
        return Err(Error::Config("policy objective has no active term".into()));
    }
    let rows = batch.len();
    let mut tape = Tape::new();
    let on = policy.bind(&mut tape, Which::Online, true);
    let tg = match policy {
        Policy::Consistency(_) => Some(policy.bind(&mut tape, Which::Target, false)),
        Policy::Diffusion(_) => None,
    };
    let mut parts = PolicyLoss::default();
    let mut total = None;
    if lc_weight > 0.0 {
        let grid = match policy {
            Policy::Consistency(p) => Some(karras_grid(&p.consts, train_n)?),
            Policy::Diffusion(_) => None,
        };
        let lc = policy.bc_loss_on_tape(
            &mut tape,
            &on,
            tg.as_ref(),
            &batch.states,
            &batch.actions,
            grid.as_ref(),
            cfg.scaler(),
            rng,
        )?;
        parts.lc = tape.value(lc)[0];
        total = Some(if lc_weight == 1.0 { lc } else { tape.scale(lc, lc_weight) });
    }
    if let Some(term) = q {
        let grid = policy.grid(cfg.n_inference)?;
        let s = tape.constant(rows, policy.state_dim(), batch.states.clone())?;
        let a = policy.sample_on_tape(&mut tape, &on, Which::Online, s, grid.as_ref(), rng)?;
        let cb = term.critics.net(term.which).bind(&mut tape, false);
        let qv = term.critics.q_value_for_policy(&mut tape, term.which, &cb, s, a)?;
        let mq = tape.mean(qv);
        let mut lq = tape.neg(mq);
        if cfg.q_abs_norm {
            let denom = tape.value(qv).iter().map(|v| v.abs()).sum::<f64>() / rows as f64;
            lq = tape.scale(lq, 1.0 / denom.max(1e-6));
        }
        parts.lq = tape.value(lq)[0];
        let weighted = tape.scale(lq, term.eta);
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("at least one term is active");
    parts.total = tape.value(total)[0];
    let mut g = tape.backward(total)?;
    Ok((parts, policy.net(Which::Online).grads(&mut g, &on)))
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iter: usize,
    pub env_steps: usize,
    pub wall_clock_s: f64,
    pub mean_return: f64,
    pub normalized_score: f64,
    pub consistency_loss: f64,
    pub q_loss: f64,
    pub critic_loss: f64,
    pub current_n: usize,
    pub epsilon: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,iter,env_steps,wall_clock_s,mean_return,normalized_score,consistency_loss,q_loss,critic_loss,current_N,epsilon";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iter,
            self.env_steps,
            self.wall_clock_s,
            self.mean_return,
            self.normalized_score,
            self.consistency_loss,
            self.q_loss,
            self.critic_loss,
            self.current_n,
            self.epsilon
        )
    }

    /// The row with the wall-clock column blanked, for reproducibility checks.
    pub fn without_clock(&self) -> MetricsRow {
        MetricsRow {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }
}

/// Per-iteration loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iter: usize,
    pub current_n: usize,
    pub lc: f64,
    pub lq: f64,
    pub critic: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Call {
    CriticStep,
    PolicyStep,
    TargetUpdate,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub critics: Option<CriticPair>,
    pub metrics: Vec<MetricsRow>,
    pub losses: Vec<LossRecord>,
    pub calls: Vec<Call>,
    pub checkpoints: Vec<PathBuf>,
    /// Normalized evaluation scores aligned with `checkpoints` (offline) or metrics rows (online).
    pub eval_history: Vec<f64>,
}

/// Where a run writes and whether it evaluates.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunIo<'a> {
    pub out_dir: Option<&'a Path>,
    pub eval_env: Option<&'a Env>,
}

struct MetricsSink {
    file: Option<std::fs::File>,
}

impl MetricsSink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let file = match dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                let mut f = std::fs::File::create(d.join("metrics.csv"))?;
                writeln!(f, "{METRICS_HEADER}")?;
                Some(f)
            }
            None => None,
        };
        Ok(MetricsSink { file })
    }

    fn write(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.to_csv())?;
        }
        Ok(())
    }
}

fn save_checkpoint(dir: Option<&Path>, epoch: usize, policy: &Policy, critics: Option<&CriticPair>) -> Result<Option<PathBuf>> {
    let Some(d) = dir else { return Ok(None) };
    let mut ck = Checkpoint::new();
    policy.save_into(&mut ck, "policy");
    if let Some(c) = critics {
        save_critics(&mut ck, c);
    }
    let path = d.join(checkpoint_name(epoch));
    ck.save(&path)?;
    Ok(Some(path))
}

pub fn save_critics(ck: &mut Checkpoint, c: &CriticPair) {
    for (name, net) in [("critic.q1", &c.q1), ("critic.q2", &c.q2), ("critic.q1_target", &c.q1_target), ("critic.q2_target", &c.q2_target)] {
        ck.extend_prefixed(name, net.names(), net.params());
    }
}

pub fn restore_critics(ck: &Checkpoint, c: &mut CriticPair) -> Result<()> {
    let names = c.q1.names().to_vec();
    ck.restore_prefixed("critic.q1", &names, c.q1.params_mut().iter_mut())?;
    ck.restore_prefixed("critic.q2", &names, c.q2.params_mut().iter_mut())?;
    ck.restore_prefixed("critic.q1_target", &names, c.q1_target.params_mut().iter_mut())?;
    ck.restore_prefixed("critic.q2_target", &names, c.q2_target.params_mut().iter_mut())
}

/// Rebuilds networks shaped by `cfg` and fills them from a checkpoint file.
/// Critics are restored when requested.
pub fn load_models(cfg: &TrainConfig, state_dim: usize, action_dim: usize, path: &Path, with_critics: bool) -> Result<(Policy, Option<CriticPair>)> {
    let ck = Checkpoint::load(path)?;
    let mut rs = Streams::new(cfg.seed);
    let mut policy = build_policy(cfg, state_dim, action_dim, &mut rs.policy_init)?;
    policy.restore_from(&ck, "policy")?;
    let critics = if with_critics {
        let mut c = build_critics(cfg, state_dim, action_dim, &mut rs.critic_init)?;
        restore_critics(&ck, &mut c)?;
        Some(c)
    } else {
        None
    };
    Ok((policy, critics))
}

fn curriculum(cfg: &TrainConfig, policy: &Policy, epoch: usize, it: usize) -> Result<usize> {
    if let Policy::Diffusion(p) = policy {
        return Ok(p.steps());
    }
    let state = if cfg.curriculum_reset_per_epoch {
        CurriculumState::new(cfg.iters_per_epoch, it + 1)?
    } else {
        let total = cfg.iters_per_epoch * cfg.epochs;
        CurriculumState::new(total, epoch * cfg.iters_per_epoch + it + 1)?
    };
    Ok(curriculum_n(state, &cfg.denoise))
}

fn check_finite(iteration: usize, parts: &[(&str, f64)]) -> Result<()> {
    if parts.iter().any(|(_, v)| !v.is_finite()) {
        let detail = parts
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(Error::NonFinite { iteration, detail });
    }
    Ok(())
}

fn critic_step(
    critics: &mut CriticPair,
    policy: &Policy,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let grid = policy.grid(cfg.n_inference)?;
    let targets = critics.bellman_target(batch, &mut |next: &[f64]| {
        policy.sample(Which::Target, next, grid.as_ref(), rng)
    })?;
    let (stats, g1, g2) = critics.critic_loss(batch, &targets)?;
    let mut grads: Vec<Vec<f64>> = g1.into_iter().chain(g2).collect();
    let CriticPair { q1, q2, .. } = critics;
    opt.step(q1.params_mut().iter_mut().chain(q2.params_mut().iter_mut()), &mut grads, cfg.grad_clip)?;
    Ok(stats.loss)
}

fn evaluate_policy(policy: &Policy, env: &Env, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let grid = policy.grid(cfg.n_inference)?;
    evaluate(env, cfg.eval_episodes, rng, &mut |obs, r| {
        policy.sample(Which::Online, obs, grid.as_ref(), r)
    })
}

/// Mean return and normalized score over `episodes` fresh episodes. The
/// environment is re-seeded from `rng`, so results depend only on its state.
pub fn evaluate(
    env: &Env,
    episodes: usize,
    rng: &mut ChaCha8Rng,
    act: &mut dyn FnMut(&[f64], &mut ChaCha8Rng) -> Result<Vec<f64>>,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut e = env.reseeded(rng.random());
    let mut total = 0.0;
    for _ in 0..episodes {
        total += e.rollout(&mut |_e, o, r| act(o, r), rng)?.0;
    }
    let mean = total / episodes as f64;
    Ok((mean, env.references.normalize(mean)))
}

/// Offline consistency (or diffusion) behavior cloning.
pub fn train_bc(dataset: &Dataset, cfg: &TrainConfig, io: RunIo<'_>) -> Result<TrainOutcome> {
    offline_loop(dataset, cfg, io, false)
}

/// Offline actor-critic: per iteration a critic step, a policy step on the
/// same minibatch, then all target updates.
pub fn train_offline_ac(dataset: &Dataset, cfg: &TrainConfig, io: RunIo<'_>) -> Result<TrainOutcome> {
    offline_loop(dataset, cfg, io, true)
}

fn offline_loop(dataset: &Dataset, cfg: &TrainConfig, io: RunIo<'_>, actor_critic: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let (sd, ad) = (dataset.obs_dim, dataset.act_dim);
    let mut rs = Streams::new(cfg.seed);
    let mut policy = build_policy(cfg, sd, ad, &mut rs.policy_init)?;
    let mut critics = if actor_critic {
        Some(build_critics(cfg, sd, ad, &mut rs.critic_init)?)
    } else {
        None
    };
    let total = cfg.epochs * cfg.iters_per_epoch;
    let mut popt = Adam::new(cfg.learning_rate, cfg.lr_decay, total)?;
    let mut copt = Adam::new(cfg.learning_rate, cfg.lr_decay, total)?;
    let mut sink = MetricsSink::open(io.out_dir)?;
    let mut out = TrainOutcome {
        policy: policy.clone(),
        critics: None,
        metrics: Vec::new(),
        losses: Vec::new(),
        calls: Vec::new(),
        checkpoints: Vec::new(),
        eval_history: Vec::new(),
    };
    let start = Instant::now();
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let (mut sum_c, mut sum_q, mut sum_cr) = (0.0, 0.0, 0.0);
        let mut n_now = 0;
        for it in 0..cfg.iters_per_epoch {
            n_now = curriculum(cfg, &policy, epoch, it)?;
            let batch = dataset.sample(cfg.batch_size, &mut rs.data)?;
            let mut closs = 0.0;
            let mut q = None;
            if let Some(c) = critics.as_mut() {
                closs = critic_step(c, &policy, &batch, cfg, &mut copt, &mut rs.critic)?;
                if cfg.record_calls {
                    out.calls.push(Call::CriticStep);
                }
                let which = c.pick_policy_critic(&mut rs.critic);
                q = Some(which);
            }
            let qterm = match (critics.as_ref(), q) {
                (Some(c), Some(which)) => Some(QTerm {
                    critics: c,
                    which,
                    eta: cfg.eta,
                }),
                _ => None,
            };
            let (parts, mut g) = policy_loss(&policy, qterm, &batch, n_now, cfg, 1.0, &mut rs.policy)?;
            check_finite(global, &[("consistency_loss", parts.lc), ("q_loss", parts.lq), ("critic_loss", closs)])?;
            popt.step(policy.online_mut().params_mut().iter_mut(), &mut g, cfg.grad_clip)?;
            if cfg.record_calls {
                out.calls.push(Call::PolicyStep);
            }
            policy.update_target()?;
            if let Some(c) = critics.as_mut() {
                c.update_targets()?;
            }
            if cfg.record_calls {
                out.calls.push(Call::TargetUpdate);
            }
            out.losses.push(LossRecord {
                epoch,
                iter: global,
                current_n: n_now,
                lc: parts.lc,
                lq: parts.lq,
                critic: closs,
            });
            sum_c += parts.lc;
            sum_q += parts.lq;
            sum_cr += closs;
            global += 1;
        }
        let k = cfg.iters_per_epoch as f64;
        let (mean_return, normalized_score) = match io.eval_env {
            Some(env) => evaluate_policy(&policy, env, cfg, &mut rs.eval)?,
            None => (f64::NAN, f64::NAN),
        };
        let row = MetricsRow {
            epoch,
            iter: global,
            env_steps: 0,
            wall_clock_s: start.elapsed().as_secs_f64(),
            mean_return,
            normalized_score,
            consistency_loss: sum_c / k,
            q_loss: sum_q / k,
            critic_loss: sum_cr / k,
            current_n: n_now,
            epsilon: 0.0,
        };
        sink.write(&row)?;
        out.metrics.push(row);
        out.eval_history.push(normalized_score);
        if let Some(p) = save_checkpoint(io.out_dir, epoch, &policy, critics.as_ref())? {
            out.checkpoints.push(p);
        }
    }
    out.policy = policy;
    out.critics = critics;
    Ok(out)
}

/// Fine-tunes pretrained networks with environment interaction.
pub fn train_offline_to_online(
    policy: Policy,
    critics: CriticPair,
    env: &mut Env,
    cfg: &TrainConfig,
    io: RunIo<'_>,
) -> Result<TrainOutcome> {
    online_loop(policy, critics, env, cfg, io)
}

/// The online loop from freshly initialized networks.
pub fn train_online(env: &mut Env, cfg: &TrainConfig, io: RunIo<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rs = Streams::new(cfg.seed);
    let policy = build_policy(cfg, env.obs_dim, env.act_dim, &mut rs.policy_init)?;
    let critics = build_critics(cfg, env.obs_dim, env.act_dim, &mut rs.critic_init)?;
    online_loop(policy, critics, env, cfg, io)
}

fn online_loop(
    mut policy: Policy,
    mut critics: CriticPair,
    env: &mut Env,
    cfg: &TrainConfig,
    io: RunIo<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rs = Streams::new(cfg.seed);
    let total = cfg.total_env_steps;
    let lr_horizon = total.max(1);
    let mut popt = Adam::new(cfg.online_learning_rate, cfg.lr_decay, lr_horizon)?;
    let mut copt = Adam::new(cfg.online_learning_rate, cfg.lr_decay, lr_horizon)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, env.obs_dim, env.act_dim)?;
    let mut sink = MetricsSink::open(io.out_dir)?;
    let grid = policy.grid(cfg.n_inference)?;
    let eval_env = io.eval_env.cloned().unwrap_or_else(|| env.clone());
    let mut out = TrainOutcome {
        policy: policy.clone(),
        critics: None,
        metrics: Vec::new(),
        losses: Vec::new(),
        calls: Vec::new(),
        checkpoints: Vec::new(),
        eval_history: Vec::new(),
    };
    let sched = ExplorationSchedule {
        total_env_steps: total.max(1),
        ..cfg.exploration
    };
    let start = Instant::now();
    let (mut sum_c, mut sum_q, mut sum_cr, mut count) = (0.0, 0.0, 0.0, 0usize);
    let mut obs = env.reset();
    let record = |policy: &Policy, out: &mut TrainOutcome, rs: &mut Streams, sums: (f64, f64, f64, usize), step: usize, eps: f64, sink: &mut MetricsSink| -> Result<()> {
        let (mean_return, normalized_score) = evaluate_policy(policy, &eval_env, cfg, &mut rs.eval)?;
        let n = sums.3.max(1) as f64;
        let row = MetricsRow {
            epoch: out.metrics.len(),
            iter: step,
            env_steps: step,
            wall_clock_s: start.elapsed().as_secs_f64(),
            mean_return,
            normalized_score,
            consistency_loss: sums.0 / n,
            q_loss: sums.1 / n,
            critic_loss: sums.2 / n,
            current_n: cfg.n_inference,
            epsilon: eps,
        };
        sink.write(&row)?;
        out.metrics.push(row);
        out.eval_history.push(normalized_score);
        Ok(())
    };
    record(&policy, &mut out, &mut rs, (0.0, 0.0, 0.0, 0), 0, epsilon_greedy(&sched, 0), &mut sink)?;
    if let Some(p) = save_checkpoint(io.out_dir, 0, &policy, Some(&critics))? {
        out.checkpoints.push(p);
    }
    for t in 0..total {
        let eps = epsilon_greedy(&sched, t);
        let action = if rs.explore.random::<f64>() < eps {
            env.random_action(&mut rs.explore)
        } else {
            policy.sample(Which::Online, &obs, grid.as_ref(), &mut rs.explore)?
        };
        let st = env.step(&action).map_err(|e| match e {
            Error::Env { .. } => e,
            other => Error::Env {
                step: t,
                reason: other.to_string(),
            },
        })?;
        buffer.push(Transition::new(&obs, &action, st.reward, &st.obs, st.done))?;
        obs = if st.done { env.reset() } else { st.obs };

        let batch = buffer.sample(cfg.batch_size, &mut rs.data)?;
        let closs = critic_step(&mut critics, &policy, &batch, cfg, &mut copt, &mut rs.critic)?;
        if cfg.record_calls {
            out.calls.push(Call::CriticStep);
        }
        let which = critics.pick_policy_critic(&mut rs.critic);
        let qterm = QTerm {
            critics: &critics,
            which,
            eta: 1.0,
        };
        let (parts, mut g) = policy_loss(&policy, Some(qterm), &batch, cfg.denoise.s1 + 1, cfg, cfg.online_bc_weight, &mut rs.policy)?;
        check_finite(t, &[("consistency_loss", parts.lc), ("q_loss", parts.lq), ("critic_loss", closs)])?;
        popt.step(policy.online_mut().params_mut().iter_mut(), &mut g, cfg.grad_clip)?;
        if cfg.record_calls {
            out.calls.push(Call::PolicyStep);
        }
        policy.update_target()?;
        critics.update_targets()?;
        if cfg.record_calls {
            out.calls.push(Call::TargetUpdate);
        }
        sum_c += parts.lc;
        sum_q += parts.lq;
        sum_cr += closs;
        count += 1;
        if (t + 1) % cfg.metrics_every == 0 || t + 1 == total {
            record(&policy, &mut out, &mut rs, (sum_c, sum_q, sum_cr, count), t + 1, eps, &mut sink)?;
            let epoch = out.metrics.len() - 1;
            if let Some(p) = save_checkpoint(io.out_dir, epoch, &policy, Some(&critics))? {
                out.checkpoints.push(p);
            }
            (sum_c, sum_q, sum_cr, count) = (0.0, 0.0, 0.0, 0);
        }
    }
    out.policy = policy;
    out.critics = Some(critics);
    Ok(out)
}

/// Result of training the Gaussian control policy.
#[derive(Clone, Debug)]
pub struct GaussianOutcome {
    pub policy: GaussianPolicy,
    pub losses: Vec<f64>,
}

/// Maximum-likelihood behavior cloning with a unimodal Gaussian.
pub fn train_gaussian_bc(dataset: &Dataset, cfg: &TrainConfig) -> Result<GaussianOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let mut rs = Streams::new(cfg.seed);
    let mut policy = GaussianPolicy::new(dataset.obs_dim, dataset.act_dim, cfg.policy_spec(), &mut rs.policy_init)?;
    let total = cfg.epochs * cfg.iters_per_epoch;
    let mut opt = Adam::new(cfg.learning_rate, cfg.lr_decay, total)?;
    let mut losses = Vec::with_capacity(total);
    for it in 0..total {
        let b = dataset.sample(cfg.batch_size, &mut rs.data)?;
        let (l, mut g) = policy.nll(&b.states, &b.actions)?;
        check_finite(it, &[("nll", l)])?;
        opt.step(policy.params_mut().iter_mut(), &mut g, cfg.grad_clip)?;
        losses.push(l);
    }
    Ok(GaussianOutcome { policy, losses })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    OfflineLastCheckpoint,
    OnlineBestEval,
}

impl SelectionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "offline" | "offline_last_checkpoint" => Ok(SelectionMode::OfflineLastCheckpoint),
            "online" | "online_best_eval" => Ok(SelectionMode::OnlineBestEval),
            other => Err(Error::Config(format!("unknown selection mode `{other}`"))),
        }
    }
}

/// Index of the chosen checkpoint: the last one offline, the best-scoring one
/// online (ties go to the latest).
pub fn select_model(num_checkpoints: usize, mode: SelectionMode, scores: Option<&[f64]>) -> Result<usize> {
    if num_checkpoints == 0 {
        return Err(Error::Contract("no checkpoints to select from".into()));
    }
    match mode {
        SelectionMode::OfflineLastCheckpoint => Ok(num_checkpoints - 1),
        SelectionMode::OnlineBestEval => {
            let s = scores
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Contract("online selection needs evaluation history".into()))?;
            if s.len() != num_checkpoints {
                return Err(Error::Dimension {
                    axis: 0,
                    expected: num_checkpoints,
                    got: s.len(),
                });
            }
            let mut best = 0;
            for (i, v) in s.iter().enumerate() {
                if *v >= s[best] {
                    best = i;
                }
            }
            Ok(best)
        }
    }
}
