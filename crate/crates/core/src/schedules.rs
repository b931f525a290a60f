//! Time grids for the denoising process, the step-count curriculum and the
//! exploration schedule.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseConstants {
    pub epsilon: f64,
    pub horizon: f64,
    pub rho: f64,
    pub s0: usize,
    pub s1: usize,
}

impl Default for DenoiseConstants {
    fn default() -> Self {
        DenoiseConstants {
            epsilon: 0.002,
            horizon: 80.0,
            rho: 7.0,
            s0: 2,
            s1: 150,
        }
    }
}

impl DenoiseConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < self.horizon && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < epsilon < horizon, got {} and {}",
                self.epsilon, self.horizon
            )));
        }
        if self.rho <= 0.0 || self.s0 == 0 || self.s1 == 0 {
            return Err(Error::Config("rho, s0 and s1 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    KarrasTraining,
    InferenceLinspace,
}

/// Increasing time points τ₁ < … < τ_N on `[ε, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseSchedule {
    pub taus: Vec<f64>,
    pub kind: GridKind,
}

impl DenoiseSchedule {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }
}

/// Karras grid: τₙ = (ε^{1/ρ} + (n−1)/(N−1)·(T^{1/ρ} − ε^{1/ρ}))^ρ.
pub fn karras_grid(consts: &DenoiseConstants, n: usize) -> Result<DenoiseSchedule> {
    consts.validate()?;
    if n < 2 {
        return Err(Error::Config(format!("karras grid needs N >= 2, got {n}")));
    }
    let inv = 1.0 / consts.rho;
    let lo = consts.epsilon.powf(inv);
    let hi = consts.horizon.powf(inv);
    let mut taus: Vec<f64> = (0..n)
        .map(|i| (lo + i as f64 / (n - 1) as f64 * (hi - lo)).powf(consts.rho))
        .collect();
    taus[0] = consts.epsilon;
    taus[n - 1] = consts.horizon;
    Ok(DenoiseSchedule {
        taus,
        kind: GridKind::KarrasTraining,
    })
}

/// Evenly spaced grid on `[ε, T]`; `N = 1` is the single point `{T}`.
pub fn inference_grid(consts: &DenoiseConstants, n: usize) -> Result<DenoiseSchedule> {
    consts.validate()?;
    let taus = match n {
        0 => return Err(Error::Config("inference grid needs N >= 1".into())),
        1 => vec![consts.horizon],
        _ => {
            let mut t: Vec<f64> = (0..n)
                .map(|i| i as f64 / (n - 1) as f64 * (consts.horizon - consts.epsilon) + consts.epsilon)
                .collect();
            t[0] = consts.epsilon;
            t[n - 1] = consts.horizon;
            t
        }
    };
    Ok(DenoiseSchedule {
        taus,
        kind: GridKind::InferenceLinspace,
    })
}

/// Position `k` within an epoch of `iters_per_epoch` iterations.
///
/// `k = 0` is accepted to express the start-of-epoch limit of the curriculum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CurriculumState {
    pub iters_per_epoch: usize,
    pub k: usize,
}

impl CurriculumState {
    pub fn new(iters_per_epoch: usize, k: usize) -> Result<Self> {
        if iters_per_epoch == 0 || k > iters_per_epoch {
            return Err(Error::Config(format!(
                "curriculum position {k} outside [0, {iters_per_epoch}]"
            )));
        }
        Ok(CurriculumState { iters_per_epoch, k })
    }
}

/// N(k) = ⌈√(k/K·((s₁+1)² − s₀²) + s₀²) − 1⌉ + 1.
pub fn curriculum_n(state: CurriculumState, consts: &DenoiseConstants) -> usize {
    let s0 = consts.s0 as f64;
    let s1 = consts.s1 as f64;
    let frac = state.k as f64 / state.iters_per_epoch as f64;
    let inner = frac * ((s1 + 1.0).powi(2) - s0 * s0) + s0 * s0;
    ((inner.sqrt() - 1.0).ceil() as usize + 1).max(2)
}

/// Linear ε-greedy decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorationSchedule {
    pub eps0: f64,
    pub eps_inf: f64,
    pub fraction: f64,
    pub total_env_steps: usize,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        ExplorationSchedule {
            eps0: 1.0,
            eps_inf: 0.01,
            fraction: 0.1,
            total_env_steps: 1_000_000,
        }
    }
}

impl ExplorationSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) || self.total_env_steps == 0 {
            return Err(Error::Config(
                "exploration fraction must be in (0, 1] with positive total steps".into(),
            ));
        }
        Ok(())
    }
}

pub fn epsilon_greedy(sched: &ExplorationSchedule, t: usize) -> f64 {
    let knee = sched.fraction * sched.total_env_steps as f64;
    let t = t as f64;
    if t >= knee {
        sched.eps_inf
    } else {
        sched.eps0 + (sched.eps_inf - sched.eps0) * t / knee
    }
}
