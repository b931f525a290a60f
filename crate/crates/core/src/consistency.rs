//! Consistency-model policy.
//!
//! The consistency function is `f(s, x, τ) = c_skip(τ)·x + c_out(τ)·F(s, c_in(τ)·x, emb(τ))`
//! where `F` is the backbone network. `c_out(ε) = 0` and `c_skip(ε) = 1`, so
//! `f(s, x, ε) = x` holds exactly for every input, independent of the weights.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Bound, Mlp, MlpSpec, TIME_EMBED_DIM};
use crate::schedules::{DenoiseConstants, DenoiseSchedule, GridKind};
use crate::tensor::ema_update;

/// Selects the online parameters θ or their moving-average copy θ^⊤.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Online,
    Target,
}

/// Per-sample weight λ applied to the consistency distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossScaler {
    /// λ = ξ / |τₙ₊₁ − τₙ|.
    StepGap { xi: f64 },
    /// λ ≡ 1.
    Unit,
}

impl LossScaler {
    pub fn weight(&self, tau_n: f64, tau_n1: f64) -> Result<f64> {
        match *self {
            LossScaler::StepGap { xi } => loss_scale(tau_n, tau_n1, xi),
            LossScaler::Unit => Ok(1.0),
        }
    }
}

/// ξ / |τₙ₊₁ − τₙ|.
pub fn loss_scale(tau_n: f64, tau_n1: f64, xi: f64) -> Result<f64> {
    if xi <= 0.0 || !xi.is_finite() {
        return Err(Error::Config(format!("xi must be positive, got {xi}")));
    }
    let gap = (tau_n1 - tau_n).abs();
    if gap == 0.0 {
        return Err(Error::DegenerateGrid(tau_n, tau_n1));
    }
    Ok(xi / gap)
}

/// How the grid index n is drawn in the consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexSampling {
    PerSample,
    Shared,
}

/// Diagnostics from one consistency-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConsistencyStats {
    pub loss: f64,
    /// Batch mean of the unweighted squared distance.
    pub mean_distance: f64,
    pub mean_weight: f64,
}

#[derive(Debug)]
pub struct ConsistencyPolicy {
    pub online: Mlp,
    pub target: Mlp,
    pub ema_alpha: f64,
    pub consts: DenoiseConstants,
    pub sigma_data: f64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_bound: f64,
    pub index_sampling: IndexSampling,
    evals: AtomicU64,
}

impl Clone for ConsistencyPolicy {
    fn clone(&self) -> Self {
        ConsistencyPolicy {
            online: self.online.clone(),
            target: self.target.clone(),
            ema_alpha: self.ema_alpha,
            consts: self.consts,
            sigma_data: self.sigma_data,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            action_bound: self.action_bound,
            index_sampling: self.index_sampling,
            evals: AtomicU64::new(self.evals.load(Ordering::Relaxed)),
        }
    }
}

impl ConsistencyPolicy {
    /// Builds a policy whose target starts as a copy of the online network.
    /// `spec.input_dim` and `spec.output_dim` are overwritten from the dims.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        mut spec: MlpSpec,
        consts: DenoiseConstants,
        rng: &mut R,
    ) -> Result<Self> {
        consts.validate()?;
        spec.input_dim = state_dim + action_dim + TIME_EMBED_DIM;
        spec.output_dim = action_dim;
        let online = Mlp::new(spec, rng)?;
        Ok(Self::from_network(online, state_dim, action_dim, consts))
    }

    pub fn from_network(online: Mlp, state_dim: usize, action_dim: usize, consts: DenoiseConstants) -> Self {
        ConsistencyPolicy {
            target: online.clone(),
            online,
            ema_alpha: 0.995,
            consts,
            sigma_data: 0.5,
            state_dim,
            action_dim,
            action_bound: 1.0,
            index_sampling: IndexSampling::PerSample,
            evals: AtomicU64::new(0),
        }
    }

    pub fn net(&self, which: Which) -> &Mlp {
        match which {
            Which::Online => &self.online,
            Which::Target => &self.target,
        }
    }

    /// Number of backbone evaluations (batched calls) since construction or reset.
    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    pub fn c_skip(&self, tau: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        let d = tau - self.consts.epsilon;
        sd2 / (d * d + sd2)
    }

    pub fn c_out(&self, tau: f64) -> f64 {
        let sd = self.sigma_data;
        sd * (tau - self.consts.epsilon) / (sd * sd + tau * tau).sqrt()
    }

    pub fn c_in(&self, tau: f64) -> f64 {
        1.0 / (tau * tau + self.sigma_data * self.sigma_data).sqrt()
    }

    /// Noise-level feature fed to the time embedding.
    pub fn c_noise(tau: f64) -> f64 {
        0.25 * tau.ln()
    }

    fn check_tau(&self, tau: f64) -> Result<()> {
        if !(tau >= self.consts.epsilon && tau <= self.consts.horizon) {
            return Err(Error::Domain {
                tau,
                lo: self.consts.epsilon,
                hi: self.consts.horizon,
            });
        }
        Ok(())
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, which: Which, trainable: bool) -> Bound {
        self.net(which).bind(tape, trainable)
    }

    /// Evaluates f on the tape for a batch; `taus` holds one time per row.
    pub fn eval_on_tape(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        which: Which,
        s: Var,
        x: Var,
        taus: &[f64],
    ) -> Result<Var> {
        let rows = tape.dims(x).rows;
        if taus.len() != rows {
            return Err(Error::Dimension {
                axis: 0,
                expected: rows,
                got: taus.len(),
            });
        }
        if tape.dims(x).cols != self.action_dim {
            return Err(Error::Dimension {
                axis: 1,
                expected: self.action_dim,
                got: tape.dims(x).cols,
            });
        }
        let mut skip = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        let mut cin = Vec::with_capacity(rows);
        let mut emb = Vec::with_capacity(rows * TIME_EMBED_DIM);
        for &t in taus {
            self.check_tau(t)?;
            skip.push(self.c_skip(t));
            out.push(self.c_out(t));
            cin.push(self.c_in(t));
            emb.extend_from_slice(&sinusoidal_embedding(Self::c_noise(t)));
        }
        let skip = tape.constant(rows, 1, skip)?;
        let out = tape.constant(rows, 1, out)?;
        let cin = tape.constant(rows, 1, cin)?;
        let emb = tape.constant(rows, TIME_EMBED_DIM, emb)?;
        let x_in = tape.mul(x, cin)?;
        let input = tape.concat_cols(&[s, x_in, emb])?;
        let f = self.net(which).forward(tape, bound, input)?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        let a = tape.mul(x, skip)?;
        let b = tape.mul(f, out)?;
        tape.add(a, b)
    }

    /// Gradient-free f(s, x, τ) for a single state/action pair.
    pub fn consistency_fn(&self, which: Which, s: &[f64], x: &[f64], tau: f64) -> Result<Vec<f64>> {
        self.check_tau(tau)?;
        if s.len() != self.state_dim {
            return Err(Error::Dimension {
                axis: 1,
                expected: self.state_dim,
                got: s.len(),
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, which, false);
        let sv = tape.constant(1, self.state_dim, s.to_vec())?;
        let xv = tape.constant(1, x.len(), x.to_vec())?;
        let y = self.eval_on_tape(&mut tape, &bound, which, sv, xv, &[tau])?;
        Ok(tape.value(y).to_vec())
    }

    /// Records the consistency loss on `tape`.
    ///
    /// `online` must be bound trainable and `target` frozen; the target branch
    /// is therefore a constant and receives no gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        online: &Bound,
        target: &Bound,
        states: &[f64],
        actions: &[f64],
        grid: &DenoiseSchedule,
        scaler: LossScaler,
        rng: &mut R,
    ) -> Result<(Var, ConsistencyStats)> {
        let n = grid.len();
        if n < 2 {
            return Err(Error::Config(format!("consistency loss needs N >= 2, got {n}")));
        }
        let ad = self.action_dim;
        let rows = actions.len() / ad;
        if rows == 0 || rows * ad != actions.len() {
            return Err(Error::Contract("empty or ragged action batch".into()));
        }
        if states.len() != rows * self.state_dim {
            return Err(Error::Dimension {
                axis: 0,
                expected: rows * self.state_dim,
                got: states.len(),
            });
        }
        let shared = match self.index_sampling {
            IndexSampling::Shared => Some(rng.random_range(0..n - 1)),
            IndexSampling::PerSample => None,
        };
        let mut x_hi = Vec::with_capacity(actions.len());
        let mut x_lo = Vec::with_capacity(actions.len());
        let mut t_hi = Vec::with_capacity(rows);
        let mut t_lo = Vec::with_capacity(rows);
        let mut weights = Vec::with_capacity(rows);
        for r in 0..rows {
            let i = shared.unwrap_or_else(|| rng.random_range(0..n - 1));
            let (tn, tn1) = (grid.taus[i], grid.taus[i + 1]);
            for a in &actions[r * ad..(r + 1) * ad] {
                let z: f64 = rng.sample(StandardNormal);
                x_hi.push(a + tn1 * z);
                x_lo.push(a + tn * z);
            }
            t_hi.push(tn1);
            t_lo.push(tn);
            weights.push(scaler.weight(tn, tn1)?);
        }
        let s = tape.constant(rows, self.state_dim, states.to_vec())?;
        let xh = tape.constant(rows, ad, x_hi)?;
        let xl = tape.constant(rows, ad, x_lo)?;
        let f_hi = self.eval_on_tape(tape, online, Which::Online, s, xh, &t_hi)?;
        let f_lo = self.eval_on_tape(tape, target, Which::Target, s, xl, &t_lo)?;
        let diff = tape.sub(f_hi, f_lo)?;
        let sq = tape.square(diff);
        let dist = tape.row_sum(sq);
        let mean_distance = tape.value(dist).iter().sum::<f64>() / rows as f64;
        let mean_weight = weights.iter().sum::<f64>() / rows as f64;
        let w = tape.constant(rows, 1, weights)?;
        let weighted = tape.mul(dist, w)?;
        let loss = tape.mean(weighted);
        Ok((
            loss,
            ConsistencyStats {
                loss: tape.value(loss)[0],
                mean_distance,
                mean_weight,
            },
        ))
    }

    /// Consistency loss and its gradient with respect to the online parameters.
    pub fn consistency_loss<R: Rng + ?Sized>(
        &self,
        states: &[f64],
        actions: &[f64],
        grid: &DenoiseSchedule,
        scaler: LossScaler,
        rng: &mut R,
    ) -> Result<(ConsistencyStats, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let on = self.bind(&mut tape, Which::Online, true);
        let tg = self.bind(&mut tape, Which::Target, false);
        let (loss, stats) = self.loss_on_tape(&mut tape, &on, &tg, states, actions, grid, scaler, rng)?;
        let mut g = tape.backward(loss)?;
        Ok((stats, self.online.grads(&mut g, &on)))
    }

    /// Multistep action inference on the tape, clamped to the action box.
    ///
    /// Starts from `x̂_T ~ N(0, T²I)`, then walks the grid from τ_{N−1} down to
    /// τ₂ re-noising with `√(τ² − ε²)·z`. Uses `1 + max(0, N − 2)` evaluations.
    pub fn infer_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        which: Which,
        s: Var,
        grid: &DenoiseSchedule,
        rng: &mut R,
    ) -> Result<Var> {
        if grid.is_empty() {
            return Err(Error::Config("empty inference grid".into()));
        }
        let rows = tape.dims(s).rows;
        let ad = self.action_dim;
        let horizon = *grid.taus.last().unwrap();
        let noise: Vec<f64> = (0..rows * ad)
            .map(|_| horizon * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let x = tape.constant(rows, ad, noise)?;
        let mut a = self.eval_on_tape(tape, bound, which, s, x, &vec![horizon; rows])?;
        let n = grid.len();
        let eps = self.consts.epsilon;
        for idx in (2..n).rev() {
            let tau = grid.taus[idx - 1];
            let scale = (tau * tau - eps * eps).max(0.0).sqrt();
            let z: Vec<f64> = (0..rows * ad)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let z = tape.constant(rows, ad, z)?;
            let xn = tape.add(a, z)?;
            a = self.eval_on_tape(tape, bound, which, s, xn, &vec![tau; rows])?;
        }
        Ok(tape.clamp(a, -self.action_bound, self.action_bound))
    }

    /// One gradient-free evaluation of f at a shared τ, without a tape.
    fn eval_direct(&self, which: Which, states: &[f64], x: &[f64], rows: usize, tau: f64) -> Result<Vec<f64>> {
        self.check_tau(tau)?;
        let (sd, ad) = (self.state_dim, self.action_dim);
        let (skip, out, cin) = (self.c_skip(tau), self.c_out(tau), self.c_in(tau));
        let emb = sinusoidal_embedding(Self::c_noise(tau));
        let mut input = Vec::with_capacity(rows * (sd + ad + TIME_EMBED_DIM));
        for r in 0..rows {
            input.extend_from_slice(&states[r * sd..(r + 1) * sd]);
            input.extend(x[r * ad..(r + 1) * ad].iter().map(|v| v * cin));
            input.extend_from_slice(&emb);
        }
        let f = self.net(which).predict(&input, rows)?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        Ok(x.iter().zip(&f).map(|(xv, fv)| xv * skip + fv * out).collect())
    }

    /// Gradient-free inference for `rows` stacked states; same draws and
    /// arithmetic as [`Self::infer_on_tape`], without recording a tape.
    pub fn multistep_inference<R: Rng + ?Sized>(
        &self,
        which: Which,
        states: &[f64],
        grid: &DenoiseSchedule,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if grid.kind != GridKind::InferenceLinspace {
            return Err(Error::Config("inference needs a linspace grid".into()));
        }
        if grid.is_empty() {
            return Err(Error::Config("empty inference grid".into()));
        }
        let sd = self.state_dim.max(1);
        let rows = states.len() / sd;
        if rows * sd != states.len() {
            return Err(Error::Dimension {
                axis: 1,
                expected: self.state_dim,
                got: states.len() % sd,
            });
        }
        let ad = self.action_dim;
        let horizon = *grid.taus.last().unwrap();
        let noise: Vec<f64> = (0..rows * ad)
            .map(|_| horizon * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut a = self.eval_direct(which, states, &noise, rows, horizon)?;
        let eps = self.consts.epsilon;
        for idx in (2..grid.len()).rev() {
            let tau = grid.taus[idx - 1];
            let scale = (tau * tau - eps * eps).max(0.0).sqrt();
            for v in a.iter_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
            a = self.eval_direct(which, states, &a, rows, tau)?;
        }
        let b = self.action_bound;
        Ok(a.into_iter().map(|v| v.clamp(-b, b)).collect())
    }

    /// θ^⊤ ← α·θ^⊤ + (1−α)·θ.
    pub fn update_target(&mut self) -> Result<()> {
        ema_update(self.target.params_mut(), self.online.params(), self.ema_alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{inference_grid, karras_grid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> ConsistencyPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConsistencyPolicy::new(2, 2, MlpSpec::new(0, vec![8, 8], 0), DenoiseConstants::default(), &mut rng)
            .unwrap()
    }

    fn zero_policy() -> ConsistencyPolicy {
        let mut p = policy(0);
        for t in p.online.params_mut().iter_mut().chain(p.target.params_mut()) {
            t.data_mut().fill(0.0);
        }
        p
    }

    fn mish(x: f64) -> f64 {
        x * (1.0 + x.exp()).ln().tanh()
    }

    /// Straight-line re-evaluation of f for one sample.
    fn oracle_f(net: &Mlp, s: &[f64], x: &[f64], tau: f64) -> Vec<f64> {
        let eps = 0.002;
        let sd = 0.5;
        let cskip = sd * sd / ((tau - eps).powi(2) + sd * sd);
        let cout = sd * (tau - eps) / (sd * sd + tau * tau).sqrt();
        let cin = 1.0 / (tau * tau + sd * sd).sqrt();
        let c = 0.25 * tau.ln();
        let mut input: Vec<f64> = s.to_vec();
        input.extend(x.iter().map(|v| v * cin));
        let mut sines = vec![];
        let mut coses = vec![];
        for i in 0..8 {
            let f = 0.25 * 2f64.powi(i);
            sines.push((c * f).sin());
            coses.push((c * f).cos());
        }
        input.extend(sines);
        input.extend(coses);
        let prm = net.params();
        let layers = prm.len() / 2;
        let mut h = input;
        for l in 0..layers {
            let (w, b) = (&prm[2 * l], &prm[2 * l + 1]);
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            h = (0..dout)
                .map(|j| {
                    let v = b.data()[j] + (0..din).map(|i| h[i] * w.data()[i * dout + j]).sum::<f64>();
                    if l + 1 < layers { mish(v) } else { v }
                })
                .collect();
        }
        x.iter().zip(&h).map(|(xv, fv)| cskip * xv + cout * fv).collect()
    }

    #[test]
    fn boundary_is_exact_identity() {
        let p = policy(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let s: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-50.0..50.0)).collect();
            let y = p.consistency_fn(Which::Online, &s, &x, 0.002).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn zero_backbone_leaves_skip_term() {
        let p = zero_policy();
        let x = [0.7, -1.3];
        let y = p.consistency_fn(Which::Online, &[0.0, 1.0], &x, 80.0).unwrap();
        let cs = p.c_skip(80.0);
        assert_eq!(y, vec![cs * 0.7, cs * -1.3]);
    }

    #[test]
    fn forward_matches_oracle() {
        let p = policy(4);
        let s = [0.3, -0.8];
        let x = [1.7, -0.2];
        for tau in [0.002, 0.37, 5.0, 80.0] {
            let y = p.consistency_fn(Which::Online, &s, &x, tau).unwrap();
            let o = oracle_f(&p.online, &s, &x, tau);
            for (a, b) in y.iter().zip(&o) {
                assert!((a - b).abs() < 1e-12, "tau {tau}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tau_outside_interval_is_domain_error() {
        let p = policy(1);
        assert!(matches!(
            p.consistency_fn(Which::Online, &[0.0, 0.0], &[0.0, 0.0], 0.001),
            Err(Error::Domain { .. })
        ));
        assert!(p.consistency_fn(Which::Online, &[0.0, 0.0], &[0.0, 0.0], 80.5).is_err());
    }

    #[test]
    fn loss_scale_values() {
        let l = loss_scale(0.002, 80.0, 100.0).unwrap();
        assert!((l - 100.0 / 79.998).abs() < 1e-12);
        assert!((l - 1.25003).abs() < 1e-5);
        assert_eq!(loss_scale(1.0, 3.5, 2.5).unwrap(), 1.0);
        assert!(matches!(loss_scale(1.0, 1.0, 1.0), Err(Error::DegenerateGrid(..))));
        assert_eq!(LossScaler::Unit.weight(1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn loss_needs_two_points() {
        let p = policy(1);
        let grid = DenoiseSchedule {
            taus: vec![0.002],
            kind: GridKind::KarrasTraining,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            p.consistency_loss(&[0.0; 2], &[0.0; 2], &grid, LossScaler::Unit, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_backbone_two_point_loss() {
        // target side sits at τ=ε and returns its input a + ε z; online side returns c_skip(T)·(a + T z)
        let p = zero_policy();
        let grid = karras_grid(&DenoiseConstants::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let actions = [0.5, -0.5];
        let (stats, grads) = p
            .consistency_loss(&[0.0, 0.0], &actions, &grid, LossScaler::Unit, &mut rng)
            .unwrap();
        // recompute: n is forced to 1, z drawn after it
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _ = rng.random_range(0..1usize);
        let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let cs = p.c_skip(80.0);
        let d: f64 = actions
            .iter()
            .zip(&z)
            .map(|(a, zz)| (cs * (a + 80.0 * zz) - (a + 0.002 * zz)).powi(2))
            .sum();
        assert!((stats.loss - d).abs() < 1e-12);
        assert!(grads.iter().flatten().all(|g| g.is_finite()));
    }

    #[test]
    fn loss_matches_scripted_single_sample() {
        let mut p = policy(21);
        // perturb target so the two branches differ in weights too
        for t in p.target.params_mut() {
            for v in t.data_mut() {
                *v *= 0.9;
            }
        }
        let grid = karras_grid(&DenoiseConstants::default(), 7).unwrap();
        let s = [0.4, -0.1];
        let a = [0.25, -0.6];
        let scaler = LossScaler::StepGap { xi: 100.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (stats, _) = p.consistency_loss(&s, &a, &grid, scaler, &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let i = rng.random_range(0..6usize);
        let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let (tn, tn1) = (grid.taus[i], grid.taus[i + 1]);
        let xh: Vec<f64> = a.iter().zip(&z).map(|(a, z)| a + tn1 * z).collect();
        let xl: Vec<f64> = a.iter().zip(&z).map(|(a, z)| a + tn * z).collect();
        let fh = oracle_f(&p.online, &s, &xh, tn1);
        let fl = oracle_f(&p.target, &s, &xl, tn);
        let d: f64 = fh.iter().zip(&fl).map(|(x, y)| (x - y).powi(2)).sum();
        let expect = 100.0 / (tn1 - tn) * d;
        assert!((stats.loss - expect).abs() < 1e-12 * (1.0 + expect.abs()));
    }

    #[test]
    fn single_sample_loss_is_weighted_squared_gap() {
        // target branch output a (τₙ = ε), online output differs by v
        let p = zero_policy();
        let grid = DenoiseSchedule {
            taus: vec![0.002, 0.002 + 1e-9],
            kind: GridKind::KarrasTraining,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = [0.3, 0.1];
        let (stats, _) = p
            .consistency_loss(&[0.0, 0.0], &a, &grid, LossScaler::StepGap { xi: 2.0 }, &mut rng)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let _ = rng.random_range(0..1usize);
        let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let t1 = 0.002 + 1e-9;
        let cs = p.c_skip(t1);
        let v: Vec<f64> = a.iter().zip(&z).map(|(a, z)| cs * (a + t1 * z) - (a + 0.002 * z)).collect();
        let lambda = 2.0 / (t1 - 0.002);
        let expect = lambda * v.iter().map(|x| x * x).sum::<f64>();
        assert!((stats.loss - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn target_receives_no_gradient() {
        let p = policy(5);
        let grid = karras_grid(&DenoiseConstants::default(), 10).unwrap();
        let mut tape = Tape::new();
        let on = p.bind(&mut tape, Which::Online, true);
        let tg = p.bind(&mut tape, Which::Target, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, _) = p
            .loss_on_tape(&mut tape, &on, &tg, &[0.1, 0.2, 0.3, 0.4], &[0.5, 0.5, -0.5, 0.0], &grid, LossScaler::Unit, &mut rng)
            .unwrap();
        let g = tape.backward(loss).unwrap();
        for v in tg.vars() {
            assert!(g.get(*v).is_none());
        }
        assert!(on.vars().iter().any(|v| g.get(*v).is_some_and(|x| x.iter().any(|y| *y != 0.0))));
    }

    #[test]
    fn evaluation_count_law() {
        let p = policy(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1usize, 2, 5, 10, 20, 50] {
            let grid = inference_grid(&DenoiseConstants::default(), n).unwrap();
            p.reset_evaluations();
            let a = p.multistep_inference(Which::Online, &[0.1, 0.2], &grid, &mut rng).unwrap();
            assert_eq!(p.evaluations(), 1 + n.saturating_sub(2) as u64, "N={n}");
            assert!(a.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn zero_backbone_inference_matches_unrolled_loop() {
        let p = zero_policy();
        let grid = inference_grid(&DenoiseConstants::default(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let got = p.multistep_inference(Which::Online, &[0.0, 0.0], &grid, &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut a: Vec<f64> = (0..2)
            .map(|_| 80.0 * rng.sample::<f64, _>(StandardNormal))
            .map(|x| p.c_skip(80.0) * x)
            .collect();
        for n in [4usize, 3, 2] {
            let tau = grid.taus[n - 1];
            let sc = (tau * tau - 0.002f64 * 0.002).sqrt();
            a = a
                .iter()
                .map(|v| v + sc * rng.sample::<f64, _>(StandardNormal))
                .map(|x| p.c_skip(tau) * x)
                .collect();
        }
        let expect: Vec<f64> = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn ema_target_update() {
        let mut p = policy(8);
        for t in p.online.params_mut() {
            t.data_mut().fill(1.0);
        }
        for t in p.target.params_mut() {
            t.data_mut().fill(0.0);
        }
        p.update_target().unwrap();
        assert!(p.target.params()[0].data().iter().all(|v| (v - 0.005).abs() < 1e-15));
    }

    #[test]
    fn direct_inference_matches_tape_bitwise() {
        let p = policy(11);
        let states = [0.3, -0.2, 1.0, 0.5, -0.7, 0.1];
        for n in [1, 2, 3, 7] {
            let grid = inference_grid(&p.consts, n).unwrap();
            let direct = p
                .multistep_inference(Which::Online, &states, &grid, &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap();
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, Which::Online, false);
            let s = tape.constant(3, 2, states.to_vec()).unwrap();
            let a = p
                .infer_on_tape(&mut tape, &b, Which::Online, s, &grid, &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap();
            assert_eq!(direct, tape.value(a));
        }
    }
}
