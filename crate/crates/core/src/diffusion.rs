//! DDPM noise-prediction policy used as the diffusion baseline.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::consistency::Which;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Bound, Mlp, MlpSpec, TIME_EMBED_DIM};
use crate::tensor::ema_update;

pub const BETA_MIN: f64 = 0.1;
pub const BETA_MAX: f64 = 10.0;

/// Variance-preserving betas for `n` steps:
/// `β_t = 1 − exp(−b_min/N − ½(b_max − b_min)(2t − 1)/N²)`.
pub fn vp_betas(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let nf = n as f64;
    Ok((1..=n)
        .map(|t| {
            let a = (-BETA_MIN / nf - 0.5 * (BETA_MAX - BETA_MIN) * (2.0 * t as f64 - 1.0) / (nf * nf)).exp();
            1.0 - a
        })
        .collect())
}

/// Noisy inputs for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    /// Step index per row, in `1..=N`.
    pub steps: Vec<usize>,
    pub noise: Vec<f64>,
    pub noisy: Vec<f64>,
}

#[derive(Debug)]
pub struct DiffusionPolicy {
    pub online: Mlp,
    pub target: Mlp,
    pub ema_alpha: f64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    evals: AtomicU64,
}

impl Clone for DiffusionPolicy {
    fn clone(&self) -> Self {
        DiffusionPolicy {
            online: self.online.clone(),
            target: self.target.clone(),
            ema_alpha: self.ema_alpha,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            action_bound: self.action_bound,
            betas: self.betas.clone(),
            alpha_bars: self.alpha_bars.clone(),
            evals: AtomicU64::new(self.evals.load(Ordering::Relaxed)),
        }
    }
}

impl DiffusionPolicy {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        mut spec: MlpSpec,
        steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.input_dim = state_dim + action_dim + TIME_EMBED_DIM;
        spec.output_dim = action_dim;
        let online = Mlp::new(spec, rng)?;
        Self::from_network(online, state_dim, action_dim, vp_betas(steps)?)
    }

    pub fn from_network(online: Mlp, state_dim: usize, action_dim: usize, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must be nonempty and inside (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(DiffusionPolicy {
            target: online.clone(),
            online,
            ema_alpha: 0.995,
            state_dim,
            action_dim,
            action_bound: 1.0,
            betas,
            alpha_bars,
            evals: AtomicU64::new(0),
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// ᾱ_t for t = 1..=N, stored at index t − 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn net(&self, which: Which) -> &Mlp {
        match which {
            Which::Online => &self.online,
            Which::Target => &self.target,
        }
    }

    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, which: Which, trainable: bool) -> Bound {
        self.net(which).bind(tape, trainable)
    }

    /// Scalar fed to the step embedding.
    pub fn step_feature(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }

    /// ε_θ(s, x, t) for a batch with one step index per row.
    pub fn predict_noise_on_tape(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        which: Which,
        s: Var,
        x: Var,
        steps: &[usize],
    ) -> Result<Var> {
        let rows = tape.dims(x).rows;
        if steps.len() != rows {
            return Err(Error::Dimension {
                axis: 0,
                expected: rows,
                got: steps.len(),
            });
        }
        let mut emb = Vec::with_capacity(rows * TIME_EMBED_DIM);
        for &t in steps {
            if t == 0 || t > self.steps() {
                return Err(Error::Contract(format!("diffusion step {t} outside 1..={}", self.steps())));
            }
            emb.extend_from_slice(&sinusoidal_embedding(self.step_feature(t)));
        }
        let emb = tape.constant(rows, TIME_EMBED_DIM, emb)?;
        let input = tape.concat_cols(&[s, x, emb])?;
        let out = self.net(which).forward(tape, bound, input)?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// Draws `t ~ U{1..N}` per row, then `ε` per coordinate, and forms
    /// `√ᾱ_t·a + √(1−ᾱ_t)·ε`.
    pub fn corrupt<R: Rng + ?Sized>(&self, actions: &[f64], rng: &mut R) -> Result<Corruption> {
        let ad = self.action_dim;
        let rows = actions.len() / ad;
        if rows == 0 || rows * ad != actions.len() {
            return Err(Error::Contract("empty or ragged action batch".into()));
        }
        let mut steps = Vec::with_capacity(rows);
        let mut noise = Vec::with_capacity(actions.len());
        let mut noisy = Vec::with_capacity(actions.len());
        for r in 0..rows {
            let t = rng.random_range(1..=self.steps());
            let ab = self.alpha_bars[t - 1];
            for a in &actions[r * ad..(r + 1) * ad] {
                let e: f64 = rng.sample(StandardNormal);
                noise.push(e);
                noisy.push(ab.sqrt() * a + (1.0 - ab).sqrt() * e);
            }
            steps.push(t);
        }
        Ok(Corruption { steps, noise, noisy })
    }

    /// Mean over the batch of `‖ε − ε_θ(s, x_t, t)‖²`.
    pub fn loss_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        states: &[f64],
        actions: &[f64],
        rng: &mut R,
    ) -> Result<Var> {
        let c = self.corrupt(actions, rng)?;
        let rows = c.steps.len();
        if states.len() != rows * self.state_dim {
            return Err(Error::Dimension {
                axis: 0,
                expected: rows * self.state_dim,
                got: states.len(),
            });
        }
        let s = tape.constant(rows, self.state_dim, states.to_vec())?;
        let x = tape.constant(rows, self.action_dim, c.noisy)?;
        let e = tape.constant(rows, self.action_dim, c.noise)?;
        let pred = self.predict_noise_on_tape(tape, bound, Which::Online, s, x, &c.steps)?;
        let d = tape.sub(e, pred)?;
        let sq = tape.square(d);
        let per_row = tape.row_sum(sq);
        Ok(tape.mean(per_row))
    }

    /// Loss value and gradient with respect to the online parameters.
    pub fn diffusion_loss<R: Rng + ?Sized>(
        &self,
        states: &[f64],
        actions: &[f64],
        rng: &mut R,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let on = self.bind(&mut tape, Which::Online, true);
        let loss = self.loss_on_tape(&mut tape, &on, states, actions, rng)?;
        let value = tape.value(loss)[0];
        let mut g = tape.backward(loss)?;
        Ok((value, self.online.grads(&mut g, &on)))
    }

    /// Ancestral sampling over exactly N evaluations, clamped to the action box.
    ///
    /// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + σ_t z` with the posterior
    /// variance `σ_t² = β_t(1−ᾱ_{t−1})/(1−ᾱ_t)` and no noise at t = 1.
    pub fn sample_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        which: Which,
        s: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let rows = tape.dims(s).rows;
        let ad = self.action_dim;
        let init: Vec<f64> = (0..rows * ad).map(|_| rng.sample(StandardNormal)).collect();
        let mut x = tape.constant(rows, ad, init)?;
        for t in (1..=self.steps()).rev() {
            let beta = self.betas[t - 1];
            let ab = self.alpha_bars[t - 1];
            let eps_hat = self.predict_noise_on_tape(tape, bound, which, s, x, &vec![t; rows])?;
            let scaled = tape.scale(eps_hat, beta / (1.0 - ab).sqrt());
            let diff = tape.sub(x, scaled)?;
            x = tape.scale(diff, 1.0 / (1.0 - beta).sqrt());
            if t > 1 {
                let ab_prev = self.alpha_bars[t - 2];
                let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                let z: Vec<f64> = (0..rows * ad)
                    .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let z = tape.constant(rows, ad, z)?;
                x = tape.add(x, z)?;
            }
        }
        Ok(tape.clamp(x, -self.action_bound, self.action_bound))
    }

    /// Gradient-free sampling for `rows` stacked states; same draws and
    /// arithmetic as [`Self::sample_on_tape`], without recording a tape.
    pub fn diffusion_sample<R: Rng + ?Sized>(&self, which: Which, states: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let (sd, ad) = (self.state_dim.max(1), self.action_dim);
        let rows = states.len() / sd;
        if rows * sd != states.len() {
            return Err(Error::Dimension {
                axis: 1,
                expected: self.state_dim,
                got: states.len() % sd,
            });
        }
        let mut x: Vec<f64> = (0..rows * ad).map(|_| rng.sample(StandardNormal)).collect();
        let mut input = Vec::with_capacity(rows * (sd + ad + TIME_EMBED_DIM));
        for t in (1..=self.steps()).rev() {
            let beta = self.betas[t - 1];
            let ab = self.alpha_bars[t - 1];
            let emb = sinusoidal_embedding(self.step_feature(t));
            input.clear();
            for r in 0..rows {
                input.extend_from_slice(&states[r * sd..(r + 1) * sd]);
                input.extend_from_slice(&x[r * ad..(r + 1) * ad]);
                input.extend_from_slice(&emb);
            }
            let eps_hat = self.net(which).predict(&input, rows)?;
            self.evals.fetch_add(1, Ordering::Relaxed);
            let k = beta / (1.0 - ab).sqrt();
            let inv = 1.0 / (1.0 - beta).sqrt();
            for (xv, e) in x.iter_mut().zip(&eps_hat) {
                *xv = inv * (*xv - k * e);
            }
            if t > 1 {
                let ab_prev = self.alpha_bars[t - 2];
                let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                for xv in x.iter_mut() {
                    *xv += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let b = self.action_bound;
        Ok(x.into_iter().map(|v| v.clamp(-b, b)).collect())
    }

    pub fn update_target(&mut self) -> Result<()> {
        ema_update(self.target.params_mut(), self.online.params(), self.ema_alpha)
    }
}
