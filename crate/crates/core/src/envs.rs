//! Toy continuous-control environments, scripted policies and offline dataset generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Transition};
use crate::error::{Error, Result};

pub const KNOWN_ENVS: [&str; 3] = ["two_mode_bandit", "point_mass_2d", "two_goal_reach"];

/// Seed used to estimate the reference returns of every environment.
pub const REFERENCE_SEED: u64 = 0x5eed_0f0e;
pub const REFERENCE_EPISODES: usize = 100;

/// Bandit modes sit at ±`BANDIT_MODE`.
pub const BANDIT_MODE: f64 = 0.8;
/// Standard deviation of the scripted bandit experts around their mode.
pub const BANDIT_EXPERT_NOISE: f64 = 0.02;

const STEP_SCALE: f64 = 0.1;
const GOAL_RADIUS: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvKind {
    /// Reward `h₁·exp(−(a−0.8)²/0.02) + h₂·exp(−(a+0.8)²/0.02)`.
    TwoModeBandit { high: f64, low: f64 },
    PointMass2d,
    TwoGoalReach,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct References {
    pub random: f64,
    pub expert: f64,
}

impl References {
    /// `100·(ret − random)/(expert − random)`.
    pub fn normalize(&self, ret: f64) -> f64 {
        100.0 * (ret - self.random) / (self.expert - self.random)
    }
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Env {
    pub id: String,
    pub kind: EnvKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub horizon: usize,
    pub action_bound: f64,
    pub references: References,
    rng: ChaCha8Rng,
    pos: [f64; 2],
    goal: [f64; 2],
    t: usize,
    done: bool,
    clamped: u64,
}

/// Builds an environment by registry id.
pub fn make_env(id: &str, seed: u64) -> Result<Env> {
    let kind = match id {
        "two_mode_bandit" => EnvKind::TwoModeBandit { high: 1.0, low: 0.2 },
        "point_mass_2d" => EnvKind::PointMass2d,
        "two_goal_reach" => EnvKind::TwoGoalReach,
        other => {
            return Err(Error::UnknownEnv {
                id: other.to_string(),
                known: KNOWN_ENVS.join(", "),
            })
        }
    };
    Env::with_kind(kind, seed)
}

impl Env {
    pub fn with_kind(kind: EnvKind, seed: u64) -> Result<Self> {
        let (id, obs_dim, act_dim, horizon) = match kind {
            EnvKind::TwoModeBandit { high, low } => {
                if !(high.is_finite() && low.is_finite()) || high == low {
                    return Err(Error::Config("bandit heights must be finite and distinct".into()));
                }
                ("two_mode_bandit", 1, 1, 1)
            }
            EnvKind::PointMass2d => ("point_mass_2d", 4, 2, 100),
            EnvKind::TwoGoalReach => ("two_goal_reach", 4, 2, 100),
        };
        let mut env = Env {
            id: id.to_string(),
            kind,
            obs_dim,
            act_dim,
            horizon,
            action_bound: 1.0,
            references: References {
                random: 0.0,
                expert: 1.0,
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
            pos: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
            done: true,
            clamped: 0,
        };
        env.references = env.estimate_references()?;
        Ok(env)
    }

    fn estimate_references(&self) -> Result<References> {
        let mut probe = self.clone();
        probe.rng = ChaCha8Rng::seed_from_u64(REFERENCE_SEED);
        let mut prng = ChaCha8Rng::seed_from_u64(REFERENCE_SEED ^ 1);
        let mut expert = 0.0;
        let mut random = 0.0;
        for _ in 0..REFERENCE_EPISODES {
            expert += probe.rollout(&mut |e, o, _r| Ok(e.expert_action(o)), &mut prng)?.0;
            random += probe.rollout(&mut |e, _o, r| Ok(e.random_action(r)), &mut prng)?.0;
        }
        let refs = References {
            random: random / REFERENCE_EPISODES as f64,
            expert: expert / REFERENCE_EPISODES as f64,
        };
        if refs.expert <= refs.random {
            return Err(Error::Config(format!("{}: expert reference does not beat random", self.id)));
        }
        Ok(refs)
    }

    /// A fresh copy with its own seed, sharing the reference returns.
    pub fn reseeded(&self, seed: u64) -> Env {
        let mut e = self.clone();
        e.rng = ChaCha8Rng::seed_from_u64(seed);
        e.t = 0;
        e.done = true;
        e.clamped = 0;
        e
    }

    /// Number of actions clamped into the box so far.
    pub fn clamp_count(&self) -> u64 {
        self.clamped
    }

    pub fn goals(&self) -> [[f64; 2]; 2] {
        [self.goal, [-self.goal[0], -self.goal[1]]]
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    fn obs(&self) -> Vec<f64> {
        match self.kind {
            EnvKind::TwoModeBandit { .. } => vec![0.0],
            _ => vec![self.pos[0], self.pos[1], self.goal[0], self.goal[1]],
        }
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        self.done = false;
        match self.kind {
            EnvKind::TwoModeBandit { .. } => {}
            EnvKind::PointMass2d => {
                for i in 0..2 {
                    self.pos[i] = self.rng.random_range(-1.0..1.0);
                    self.goal[i] = self.rng.random_range(-1.0..1.0);
                }
            }
            EnvKind::TwoGoalReach => {
                let th: f64 = self.rng.random_range(0.0..std::f64::consts::PI);
                self.goal = [GOAL_RADIUS * th.cos(), GOAL_RADIUS * th.sin()];
                self.pos = [self.rng.random_range(-0.05..0.05), self.rng.random_range(-0.05..0.05)];
            }
        }
        self.obs()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        if self.done {
            return Err(Error::Env {
                step: self.t,
                reason: "step called on a finished episode; reset first".into(),
            });
        }
        if action.len() != self.act_dim {
            return Err(Error::Dimension {
                axis: 1,
                expected: self.act_dim,
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Env {
                step: self.t,
                reason: "non-finite action".into(),
            });
        }
        let b = self.action_bound;
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-b, b)).collect();
        if a != action {
            self.clamped += 1;
        }
        let reward = match self.kind {
            EnvKind::TwoModeBandit { high, low } => bandit_reward(high, low, a[0]),
            EnvKind::PointMass2d => {
                self.move_by(&a);
                -dist(self.pos, self.goal)
            }
            EnvKind::TwoGoalReach => {
                self.move_by(&a);
                let [g1, g2] = self.goals();
                -dist(self.pos, g1).min(dist(self.pos, g2))
            }
        };
        self.t += 1;
        self.done = self.t >= self.horizon;
        Ok(Step {
            obs: self.obs(),
            reward,
            done: self.done,
        })
    }

    fn move_by(&mut self, a: &[f64]) {
        self.pos[0] += STEP_SCALE * a[0];
        self.pos[1] += STEP_SCALE * a[1];
    }

    /// Uniform action in the box.
    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let b = self.action_bound;
        (0..self.act_dim).map(|_| rng.random_range(-b..=b)).collect()
    }

    /// Deterministic reference expert: the high bandit mode, or a straight line
    /// to the (first) goal.
    pub fn expert_action(&self, obs: &[f64]) -> Vec<f64> {
        match self.kind {
            EnvKind::TwoModeBandit { high, low } => {
                vec![if high >= low { BANDIT_MODE } else { -BANDIT_MODE }]
            }
            _ => toward(obs, [obs[2], obs[3]], self.action_bound),
        }
    }

    /// One of the two scripted experts that make up mixture datasets.
    pub fn mixture_expert_action<R: Rng + ?Sized>(&self, which: usize, obs: &[f64], rng: &mut R) -> Vec<f64> {
        match self.kind {
            EnvKind::TwoModeBandit { .. } => {
                let m = if which == 0 { BANDIT_MODE } else { -BANDIT_MODE };
                let n: f64 = Normal::new(0.0, BANDIT_EXPERT_NOISE).unwrap().sample(rng);
                vec![m + n]
            }
            EnvKind::PointMass2d => {
                if which == 0 {
                    toward(obs, [obs[2], obs[3]], self.action_bound)
                } else {
                    // axis-aligned: close the x gap first, then y
                    let dx = obs[2] - obs[0];
                    if dx.abs() > 1e-3 {
                        vec![(dx / STEP_SCALE).clamp(-1.0, 1.0), 0.0]
                    } else {
                        vec![0.0, ((obs[3] - obs[1]) / STEP_SCALE).clamp(-1.0, 1.0)]
                    }
                }
            }
            EnvKind::TwoGoalReach => {
                let g = if which == 0 { [obs[2], obs[3]] } else { [-obs[2], -obs[3]] };
                toward(obs, g, self.action_bound)
            }
        }
    }

    /// Runs one episode; the policy sees the env, the observation and the rng.
    pub fn rollout<R: Rng + ?Sized>(
        &mut self,
        policy: &mut dyn FnMut(&Env, &[f64], &mut R) -> Result<Vec<f64>>,
        rng: &mut R,
    ) -> Result<(f64, Vec<Transition>)> {
        let mut obs = self.reset();
        let mut ret = 0.0;
        let mut out = Vec::with_capacity(self.horizon);
        loop {
            let a = policy(self, &obs, rng)?;
            let st = self.step(&a)?;
            ret += st.reward;
            out.push(Transition::new(&obs, &a, st.reward, &st.obs, st.done));
            obs = st.obs;
            if st.done {
                return Ok((ret, out));
            }
        }
    }
}

pub fn bandit_reward(high: f64, low: f64, a: f64) -> f64 {
    high * (-(a - BANDIT_MODE).powi(2) / 0.02).exp() + low * (-(a + BANDIT_MODE).powi(2) / 0.02).exp()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn toward(obs: &[f64], goal: [f64; 2], bound: f64) -> Vec<f64> {
    vec![
        ((goal[0] - obs[0]) / STEP_SCALE).clamp(-bound, bound),
        ((goal[1] - obs[1]) / STEP_SCALE).clamp(-bound, bound),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Behavior {
    /// Two scripted experts, chosen per episode with equal probability.
    MixtureExpert,
    /// Scripted expert with Gaussian action noise.
    Medium,
    /// Episodes whose policy interpolates from uniform random to expert,
    /// standing in for snapshots of an online run.
    MediumReplayAnalog,
}

impl Behavior {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mixture_expert" => Ok(Behavior::MixtureExpert),
            "medium" => Ok(Behavior::Medium),
            "medium_replay_analog" => Ok(Behavior::MediumReplayAnalog),
            other => Err(Error::Config(format!(
                "unknown behavior `{other}` (known: mixture_expert, medium, medium_replay_analog)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Behavior::MixtureExpert => "mixture_expert",
            Behavior::Medium => "medium",
            Behavior::MediumReplayAnalog => "medium_replay_analog",
        }
    }
}

pub const MEDIUM_NOISE: f64 = 0.5;

/// Rolls out the behavior policy until exactly `n` transitions are collected.
pub fn generate_offline_dataset(env: &mut Env, behavior: Behavior, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Dataset::new(env.id.clone(), env.obs_dim, env.act_dim);
    let episodes = n.div_ceil(env.horizon);
    let noise = Normal::new(0.0, MEDIUM_NOISE).unwrap();
    let b = env.action_bound;
    for ep in 0..episodes {
        let which = rng.random_range(0..2usize);
        let mix = if episodes > 1 { ep as f64 / (episodes - 1) as f64 } else { 1.0 };
        let (_, trs) = env.rollout(
            &mut |e: &Env, o: &[f64], r: &mut ChaCha8Rng| {
                Ok(match behavior {
                    Behavior::MixtureExpert => e.mixture_expert_action(which, o, r),
                    Behavior::Medium => e
                        .expert_action(o)
                        .into_iter()
                        .map(|a| (a + noise.sample(r)).clamp(-b, b))
                        .collect(),
                    Behavior::MediumReplayAnalog => {
                        let ex = e.expert_action(o);
                        let rn = e.random_action(r);
                        ex.iter()
                            .zip(rn)
                            .map(|(x, y)| (mix * x + (1.0 - mix) * y + 0.1 * noise.sample(r)).clamp(-b, b))
                            .collect()
                    }
                })
            },
            &mut rng,
        )?;
        for t in trs {
            if data.len() == n {
                break;
            }
            data.push(t)?;
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandit_high_mode_reward() {
        let mut e = make_env("two_mode_bandit", 0).unwrap();
        e.reset();
        let st = e.step(&[0.8]).unwrap();
        assert_eq!(st.reward, 1.0 + 0.2 * (-(1.6f64).powi(2) / 0.02).exp());
        assert!(st.done);
        assert!((e.references.expert - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_mass_at_goal_zero_action() {
        let mut e = make_env("point_mass_2d", 3).unwrap();
        e.reset();
        e.pos = e.goal;
        assert_eq!(e.step(&[0.0, 0.0]).unwrap().reward, 0.0);
    }

    #[test]
    fn unknown_env_lists_known() {
        let err = make_env("foo", 0).unwrap_err();
        match err {
            Error::UnknownEnv { id, known } => {
                assert_eq!(id, "foo");
                assert!(known.contains("point_mass_2d"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn horizon_and_step_after_done() {
        let mut e = make_env("point_mass_2d", 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, trs) = e.rollout(&mut |e, _o, r| Ok(e.random_action(r)), &mut rng).unwrap();
        assert_eq!(trs.len(), 100);
        assert!(trs[99].done && !trs[98].done);
        assert!(matches!(e.step(&[0.0, 0.0]), Err(Error::Env { .. })));
    }

    #[test]
    fn out_of_box_actions_are_clamped_and_counted() {
        let mut e = make_env("point_mass_2d", 1).unwrap();
        e.reset();
        let p0 = e.position();
        e.step(&[5.0, -0.5]).unwrap();
        assert_eq!(e.clamp_count(), 1);
        assert!((e.position()[0] - p0[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = |seed| {
            let mut e = make_env("two_goal_reach", seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            e.rollout(&mut |e, _o, r| Ok(e.random_action(r)), &mut rng).unwrap().1
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn references_ordered() {
        for id in KNOWN_ENVS {
            let e = make_env(id, 0).unwrap();
            assert!(e.references.expert > e.references.random, "{id}");
        }
    }

    #[test]
    fn dataset_size_and_zero_rejected() {
        let mut e = make_env("point_mass_2d", 0).unwrap();
        for b in [Behavior::MixtureExpert, Behavior::Medium, Behavior::MediumReplayAnalog] {
            assert_eq!(generate_offline_dataset(&mut e, b, 250, 1).unwrap().len(), 250);
        }
        assert!(generate_offline_dataset(&mut e, Behavior::Medium, 0, 1).is_err());
    }

    #[test]
    fn two_goal_experts_reach_opposite_goals() {
        let mut e = make_env("two_goal_reach", 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for which in 0..2 {
            e.rollout(&mut |e, o, r| Ok(e.mixture_expert_action(which, o, r)), &mut rng)
                .unwrap();
            let g = e.goals()[which];
            assert!(dist(e.position(), g) < 1e-9);
        }
    }
}
