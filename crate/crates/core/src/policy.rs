//! Head-agnostic policy wrapper and the unimodal Gaussian control policy.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::consistency::{ConsistencyPolicy, LossScaler, Which};
use crate::diffusion::DiffusionPolicy;
use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp, MlpSpec};
use crate::schedules::{inference_grid, DenoiseSchedule};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Consistency,
    Diffusion,
}

impl Head {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "consistency" => Ok(Head::Consistency),
            "diffusion" => Ok(Head::Diffusion),
            other => Err(Error::Config(format!(
                "unknown head `{other}` (known: consistency, diffusion)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::Consistency => "consistency",
            Head::Diffusion => "diffusion",
        }
    }
}

/// A generative policy with either head.
#[derive(Clone, Debug)]
pub enum Policy {
    Consistency(ConsistencyPolicy),
    Diffusion(DiffusionPolicy),
}

impl Policy {
    pub fn head(&self) -> Head {
        match self {
            Policy::Consistency(_) => Head::Consistency,
            Policy::Diffusion(_) => Head::Diffusion,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Policy::Consistency(p) => p.state_dim,
            Policy::Diffusion(p) => p.state_dim,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Policy::Consistency(p) => p.action_dim,
            Policy::Diffusion(p) => p.action_dim,
        }
    }

    pub fn net(&self, which: Which) -> &Mlp {
        match self {
            Policy::Consistency(p) => p.net(which),
            Policy::Diffusion(p) => p.net(which),
        }
    }

    pub fn online_mut(&mut self) -> &mut Mlp {
        match self {
            Policy::Consistency(p) => &mut p.online,
            Policy::Diffusion(p) => &mut p.online,
        }
    }

    pub fn evaluations(&self) -> u64 {
        match self {
            Policy::Consistency(p) => p.evaluations(),
            Policy::Diffusion(p) => p.evaluations(),
        }
    }

    pub fn reset_evaluations(&self) {
        match self {
            Policy::Consistency(p) => p.reset_evaluations(),
            Policy::Diffusion(p) => p.reset_evaluations(),
        }
    }

    pub fn update_target(&mut self) -> Result<()> {
        match self {
            Policy::Consistency(p) => p.update_target(),
            Policy::Diffusion(p) => p.update_target(),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, which: Which, trainable: bool) -> Bound {
        self.net(which).bind(tape, trainable)
    }

    /// Inference grid used by the consistency head for `n` steps.
    pub fn grid(&self, n: usize) -> Result<Option<DenoiseSchedule>> {
        match self {
            Policy::Consistency(p) => Ok(Some(inference_grid(&p.consts, n)?)),
            Policy::Diffusion(_) => Ok(None),
        }
    }

    /// Draws actions on the tape. The consistency head walks `grid`; the
    /// diffusion head uses its own N steps.
    pub fn sample_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        which: Which,
        s: Var,
        grid: Option<&DenoiseSchedule>,
        rng: &mut R,
    ) -> Result<Var> {
        match self {
            Policy::Consistency(p) => {
                let g = grid.ok_or_else(|| Error::Config("consistency sampling needs a grid".into()))?;
                p.infer_on_tape(tape, bound, which, s, g, rng)
            }
            Policy::Diffusion(p) => p.sample_on_tape(tape, bound, which, s, rng),
        }
    }

    /// Gradient-free sampling for row-stacked states.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        which: Which,
        states: &[f64],
        grid: Option<&DenoiseSchedule>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        match self {
            Policy::Consistency(p) => {
                let g = grid.ok_or_else(|| Error::Config("consistency sampling needs a grid".into()))?;
                p.multistep_inference(which, states, g, rng)
            }
            Policy::Diffusion(p) => p.diffusion_sample(which, states, rng),
        }
    }

    /// Behavior-cloning term on the tape: the consistency loss over the
    /// training grid, or the noise-prediction loss.
    #[allow(clippy::too_many_arguments)]
    pub fn bc_loss_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        online: &Bound,
        target: Option<&Bound>,
        states: &[f64],
        actions: &[f64],
        train_grid: Option<&DenoiseSchedule>,
        scaler: LossScaler,
        rng: &mut R,
    ) -> Result<Var> {
        match self {
            Policy::Consistency(p) => {
                let tg = target.ok_or_else(|| Error::Contract("consistency loss needs the target bound".into()))?;
                let g = train_grid.ok_or_else(|| Error::Contract("consistency loss needs a training grid".into()))?;
                Ok(p.loss_on_tape(tape, online, tg, states, actions, g, scaler, rng)?.0)
            }
            Policy::Diffusion(p) => p.loss_on_tape(tape, online, states, actions, rng),
        }
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        let on = self.net(Which::Online);
        let tg = self.net(Which::Target);
        ck.extend_prefixed(&format!("{prefix}.online"), on.names(), on.params());
        ck.extend_prefixed(&format!("{prefix}.target"), tg.names(), tg.params());
    }

    pub fn restore_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let (on, tg) = match self {
            Policy::Consistency(p) => (&mut p.online, &mut p.target),
            Policy::Diffusion(p) => (&mut p.online, &mut p.target),
        };
        let names = on.names().to_vec();
        ck.restore_prefixed(&format!("{prefix}.online"), &names, on.params_mut().iter_mut())?;
        ck.restore_prefixed(&format!("{prefix}.target"), &names, tg.params_mut().iter_mut())
    }
}

/// Unimodal Gaussian policy `N(μ(s), diag σ(s)²)` trained by likelihood.
#[derive(Clone, Debug)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
}

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, mut spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.input_dim = state_dim;
        spec.output_dim = 2 * action_dim;
        Ok(GaussianPolicy {
            net: Mlp::new(spec, rng)?,
            state_dim,
            action_dim,
            action_bound: 1.0,
        })
    }

    /// Mean negative log-likelihood (up to a constant) and its gradient.
    pub fn nll(&self, states: &[f64], actions: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
        let ad = self.action_dim;
        let rows = actions.len() / ad;
        if rows == 0 || rows * ad != actions.len() || states.len() != rows * self.state_dim {
            return Err(Error::Contract("empty or ragged batch".into()));
        }
        let mut tape = Tape::new();
        let b = self.net.bind(&mut tape, true);
        let s = tape.constant(rows, self.state_dim, states.to_vec())?;
        let a = tape.constant(rows, ad, actions.to_vec())?;
        let out = self.net.forward(&mut tape, &b, s)?;
        let mu = tape.slice_cols(out, 0, ad)?;
        let raw = tape.slice_cols(out, ad, ad)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let d = tape.sub(a, mu)?;
        let d2 = tape.square(d);
        let neg2 = tape.scale(log_std, -2.0);
        let inv_var = tape.exp(neg2);
        let z2 = tape.mul(d2, inv_var)?;
        let half = tape.scale(z2, 0.5);
        let per = tape.add(half, log_std)?;
        let per_row = tape.row_sum(per);
        let loss = tape.mean(per_row);
        let value = tape.value(loss)[0];
        let mut g = tape.backward(loss)?;
        Ok((value, self.net.grads(&mut g, &b)))
    }

    /// Per-row means and standard deviations.
    pub fn distribution(&self, states: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = states.len() / self.state_dim.max(1);
        let out = self.net.predict(states, rows)?;
        let ad = self.action_dim;
        let mut mu = Vec::with_capacity(rows * ad);
        let mut sd = Vec::with_capacity(rows * ad);
        for r in 0..rows {
            mu.extend_from_slice(&out[r * 2 * ad..r * 2 * ad + ad]);
            sd.extend(out[r * 2 * ad + ad..(r + 1) * 2 * ad].iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX).exp()));
        }
        Ok((mu, sd))
    }

    pub fn sample<R: Rng + ?Sized>(&self, states: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let (mu, sd) = self.distribution(states)?;
        let b = self.action_bound;
        Ok(mu
            .iter()
            .zip(&sd)
            .map(|(m, s)| (m + s * rng.sample::<f64, _>(StandardNormal)).clamp(-b, b))
            .collect())
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.extend_prefixed(prefix, self.net.names(), self.net.params());
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.net.params_mut()
    }
}
