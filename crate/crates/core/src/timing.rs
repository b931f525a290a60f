//! Wall-clock scaling of training and inference with the step count N.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::config::BenchConfig;
use crate::consistency::Which;
use crate::data::Dataset;
use crate::envs::{generate_offline_dataset, make_env, Behavior};
use crate::error::{Error, Result};
use crate::policy::Head;
use crate::trainers::{build_policy, train_offline_ac, RunIo, Streams, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingRow {
    pub n: usize,
    pub train_seconds_per_epoch_mean: f64,
    pub train_seconds_per_epoch_sd: f64,
    pub inference_ms_per_sample_median: f64,
    pub inference_ms_per_sample_mean: f64,
    pub inference_ms_per_sample_sd: f64,
    pub model_evals_per_sample: u64,
}

/// Ordinary least-squares line `y = slope·x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub head: Head,
    pub rows: Vec<TimingRow>,
    pub train_fit: LinearFit,
    pub inference_fit: LinearFit,
}

pub const TIMING_HEADER: &str = "N,train_seconds_per_epoch_mean,train_seconds_per_epoch_sd,inference_ms_per_sample_median,inference_ms_per_sample_mean,inference_ms_per_sample_sd,model_evals_per_sample";

pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            axis: 0,
            expected: x.len(),
            got: y.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if x.len() < 2 || sxx == 0.0 {
        return Err(Error::Contract("a linear fit needs two distinct x values".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
    })
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Per-sample inference latency (ms) after `warmup` discarded draws, and the
/// evaluations one draw costs.
pub fn inference_latency(cfg: &TrainConfig, state_dim: usize, action_dim: usize, samples: usize, warmup: usize) -> Result<(Vec<f64>, u64)> {
    let mut rs = Streams::new(cfg.seed);
    let policy = build_policy(cfg, state_dim, action_dim, &mut rs.policy_init)?;
    let grid = policy.grid(cfg.n_inference)?;
    let state = vec![0.1; state_dim];
    policy.reset_evaluations();
    policy.sample(Which::Online, &state, grid.as_ref(), &mut rs.eval)?;
    let evals = policy.evaluations();
    let mut out = Vec::with_capacity(samples);
    for i in 0..warmup + samples {
        let t0 = Instant::now();
        let a = policy.sample(Which::Online, &state, grid.as_ref(), &mut rs.eval)?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(a);
        if i >= warmup {
            out.push(dt);
        }
    }
    Ok((out, evals))
}

/// Latencies of two configurations measured alternately, draw by draw, so
/// that machine drift affects both equally.
pub fn paired_inference_latency(
    a: &TrainConfig,
    b: &TrainConfig,
    state_dim: usize,
    action_dim: usize,
    samples: usize,
    warmup: usize,
) -> Result<[(Vec<f64>, u64); 2]> {
    let mut out: Vec<(Vec<f64>, u64)> = Vec::with_capacity(2);
    let mut runs = Vec::with_capacity(2);
    for cfg in [a, b] {
        let mut rs = Streams::new(cfg.seed);
        let policy = build_policy(cfg, state_dim, action_dim, &mut rs.policy_init)?;
        let grid = policy.grid(cfg.n_inference)?;
        policy.reset_evaluations();
        policy.sample(Which::Online, &vec![0.1; state_dim], grid.as_ref(), &mut rs.eval)?;
        out.push((Vec::with_capacity(samples), policy.evaluations()));
        runs.push((policy, grid, rs.eval));
    }
    let state = vec![0.1; state_dim];
    for i in 0..warmup + samples {
        for (k, (policy, grid, rng)) in runs.iter_mut().enumerate() {
            let t0 = Instant::now();
            let act = policy.sample(Which::Online, &state, grid.as_ref(), rng)?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(act);
            if i >= warmup {
                out[k].0.push(dt);
            }
        }
    }
    let second = out.pop().expect("two runs");
    let first = out.pop().expect("two runs");
    Ok([first, second])
}

/// Inference-only reports for the consistency and diffusion heads on the
/// same backbone, measured pairwise at every N.
pub fn inference_comparison(base: &TrainConfig, bench: &BenchConfig, state_dim: usize, action_dim: usize) -> Result<[TimingReport; 2]> {
    let mut ns = bench.n_list.clone();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 2 || bench.samples == 0 {
        return Err(Error::Config("comparison needs two step counts and samples".into()));
    }
    let mut rows: [Vec<TimingRow>; 2] = [Vec::new(), Vec::new()];
    for &n in &ns {
        let c = TrainConfig {
            head: Head::Consistency,
            n_inference: n,
            ..base.clone()
        };
        let d = TrainConfig {
            head: Head::Diffusion,
            ..c.clone()
        };
        let pair = paired_inference_latency(&c, &d, state_dim, action_dim, bench.samples, bench.warmup)?;
        for (k, (lat, evals)) in pair.iter().enumerate() {
            let (m, sd) = mean_sd(lat);
            rows[k].push(TimingRow {
                n,
                train_seconds_per_epoch_mean: f64::NAN,
                train_seconds_per_epoch_sd: f64::NAN,
                inference_ms_per_sample_median: median(lat),
                inference_ms_per_sample_mean: m,
                inference_ms_per_sample_sd: sd,
                model_evals_per_sample: *evals,
            });
        }
    }
    let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let nan_fit = LinearFit {
        slope: f64::NAN,
        intercept: f64::NAN,
    };
    let [rc, rd] = rows;
    let report = |head, rows: Vec<TimingRow>| -> Result<TimingReport> {
        let y: Vec<f64> = rows.iter().map(|r| r.inference_ms_per_sample_median).collect();
        Ok(TimingReport {
            head,
            inference_fit: ols(&x, &y)?,
            train_fit: nan_fit,
            rows,
        })
    };
    Ok([report(Head::Consistency, rc)?, report(Head::Diffusion, rd)?])
}

/// Seconds per training epoch of the offline actor-critic loop.
pub fn train_epoch_seconds(cfg: &TrainConfig, dataset: &Dataset, epochs: usize, iters: usize) -> Result<Vec<f64>> {
    let c = TrainConfig {
        epochs,
        iters_per_epoch: iters,
        ..cfg.clone()
    };
    let out = train_offline_ac(dataset, &c, RunIo::default())?;
    let mut prev = 0.0;
    Ok(out
        .metrics
        .iter()
        .map(|m| {
            let d = m.wall_clock_s - prev;
            prev = m.wall_clock_s;
            d
        })
        .collect())
}

/// Runs the timing comparison for one head over `bench.n_list` on `env_id`.
pub fn timing_harness(head: Head, base: &TrainConfig, bench: &BenchConfig, env_id: &str, measure_training: bool) -> Result<TimingReport> {
    if bench.n_list.is_empty() || bench.samples == 0 {
        return Err(Error::Config("timing needs a nonempty N list and samples".into()));
    }
    if measure_training && (bench.train_epochs == 0 || bench.train_iters == 0) {
        return Err(Error::Config("timing needs positive training epochs and iterations".into()));
    }
    let mut ns = bench.n_list.clone();
    ns.sort_unstable();
    ns.dedup();
    let mut env = make_env(env_id, base.seed)?;
    let dataset = if measure_training {
        Some(generate_offline_dataset(&mut env, Behavior::MixtureExpert, 1000.max(base.batch_size), base.seed)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(ns.len());
    for &n in &ns {
        let cfg = TrainConfig {
            head,
            n_inference: n,
            ..base.clone()
        };
        cfg.validate()?;
        let (lat, evals) = inference_latency(&cfg, env.obs_dim, env.act_dim, bench.samples, bench.warmup)?;
        let (im, isd) = mean_sd(&lat);
        let (tm, tsd) = match &dataset {
            Some(d) => mean_sd(&train_epoch_seconds(&cfg, d, bench.train_epochs, bench.train_iters)?),
            None => (f64::NAN, f64::NAN),
        };
        rows.push(TimingRow {
            n,
            train_seconds_per_epoch_mean: tm,
            train_seconds_per_epoch_sd: tsd,
            inference_ms_per_sample_median: median(&lat),
            inference_ms_per_sample_mean: im,
            inference_ms_per_sample_sd: isd,
            model_evals_per_sample: evals,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let nan_fit = LinearFit {
        slope: f64::NAN,
        intercept: f64::NAN,
    };
    let fit = |y: Vec<f64>| if x.len() >= 2 { ols(&x, &y) } else { Ok(nan_fit) };
    let inference_fit = fit(rows.iter().map(|r| r.inference_ms_per_sample_median).collect())?;
    let train_fit = if measure_training {
        fit(rows.iter().map(|r| r.train_seconds_per_epoch_mean).collect())?
    } else {
        nan_fit
    };
    Ok(TimingReport {
        head,
        rows,
        train_fit,
        inference_fit,
    })
}

impl TimingReport {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{TIMING_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.n,
                r.train_seconds_per_epoch_mean,
                r.train_seconds_per_epoch_sd,
                r.inference_ms_per_sample_median,
                r.inference_ms_per_sample_mean,
                r.inference_ms_per_sample_sd,
                r.model_evals_per_sample
            )?;
        }
        Ok(())
    }

    pub fn write_fit_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "column,slope,intercept")?;
        writeln!(w, "train_seconds_per_epoch,{},{}", self.train_fit.slope, self.train_fit.intercept)?;
        writeln!(w, "inference_ms_per_sample,{},{}", self.inference_fit.slope, self.inference_fit.intercept)?;
        Ok(())
    }

    /// Writes `timing_<head>.csv` and `timing_fit_<head>.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let name = self.head.name();
        let mut f = std::fs::File::create(dir.join(format!("timing_{name}.csv")))?;
        self.write_csv(&mut f)?;
        let mut g = std::fs::File::create(dir.join(format!("timing_fit_{name}.csv")))?;
        self.write_fit_csv(&mut g)
    }
}
