use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrDecay {
    Constant,
    CosineAnnealing,
}

/// Adam with optional cosine-annealed learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: LrDecay,
    pub total_steps: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, decay: LrDecay, total_steps: usize) -> Result<Self> {
        if learning_rate <= 0.0 || !learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("cosine horizon must be positive".into()));
        }
        Ok(Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay,
            total_steps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate applied at step `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::CosineAnnealing => {
                let frac = t.min(self.total_steps) as f64 / self.total_steps as f64;
                self.learning_rate * 0.5 * (1.0 + (PI * frac).cos())
            }
        }
    }

    /// Applies one update. Returns the global gradient l2 norm measured before clipping.
    pub fn step<'t>(
        &mut self,
        params: impl IntoIterator<Item = &'t mut Tensor>,
        grads: &mut [Vec<f64>],
        clip_norm: Option<f64>,
    ) -> Result<f64> {
        let norm = clip_grad_norm(grads, clip_norm)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(Error::Dimension {
                axis: 0,
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            let g = grads.get(i).ok_or(Error::Dimension {
                axis: 0,
                expected: i + 1,
                got: grads.len(),
            })?;
            if g.len() != p.len() {
                return Err(Error::Dimension {
                    axis: 0,
                    expected: p.len(),
                    got: g.len(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        if count != grads.len() {
            return Err(Error::Dimension {
                axis: 0,
                expected: grads.len(),
                got: count,
            });
        }
        Ok(norm)
    }
}

/// Scales `grads` in place so that their joint l2 norm is at most `clip_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], clip_norm: Option<f64>) -> Result<f64> {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if let Some(c) = clip_norm {
        if c <= 0.0 || !c.is_finite() {
            return Err(Error::Config(format!("clip norm must be positive, got {c}")));
        }
        if norm > c {
            let s = c / norm;
            grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_halves_norm_eighteen_at_nine() {
        // 18 = ‖(6, 12, 12)‖
        let mut g = vec![vec![6.0, 12.0], vec![12.0]];
        let n = clip_grad_norm(&mut g, Some(9.0)).unwrap();
        assert_eq!(n, 18.0);
        assert_eq!(g, vec![vec![3.0, 6.0], vec![6.0]]);
    }

    #[test]
    fn nonpositive_clip_is_config_error() {
        let mut g = vec![vec![1.0]];
        assert!(matches!(clip_grad_norm(&mut g, Some(0.0)), Err(Error::Config(_))));
        assert!(clip_grad_norm(&mut g, Some(-1.0)).is_err());
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = vec![Tensor::new(vec![2], vec![0.5, -0.25]).unwrap()];
        let mut opt = Adam::new(1e-2, LrDecay::Constant, 10).unwrap();
        let mut g = vec![vec![0.0, 0.0]];
        opt.step(p.iter_mut(), &mut g, Some(1.0)).unwrap();
        assert_eq!(p[0].data(), &[0.5, -0.25]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn scalar_update_matches_hand_evaluation() {
        let lr = 0.1;
        let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut opt = Adam::new(lr, LrDecay::Constant, 10).unwrap();
        opt.step(p.iter_mut(), &mut [vec![0.5]], None).unwrap();
        // first step: m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
        let expect1 = 1.0 - lr * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - expect1).abs() < 1e-12);
        opt.step(p.iter_mut(), &mut [vec![-1.0]], None).unwrap();
        let m = 0.9 * (0.1 * 0.5) + 0.1 * -1.0;
        let v = 0.999 * (0.001 * 0.25) + 0.001 * 1.0;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64.powi(2));
        let expect2 = expect1 - lr * mh / (vh.sqrt() + 1e-8);
        assert!((p[0].data()[0] - expect2).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let opt = Adam::new(1.0, LrDecay::CosineAnnealing, 100).unwrap();
        assert_eq!(opt.lr_at(0), 1.0);
        assert!((opt.lr_at(50) - 0.5).abs() < 1e-12);
        assert!(opt.lr_at(100).abs() < 1e-12);
        assert!(opt.lr_at(500).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent(g in prop::collection::vec(-50.0f64..50.0, 1..20), c in 0.1f64..20.0) {
            let mut once = vec![g.clone()];
            clip_grad_norm(&mut once, Some(c)).unwrap();
            let mut twice = once.clone();
            clip_grad_norm(&mut twice, Some(c)).unwrap();
            for (a, b) in once[0].iter().zip(&twice[0]) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn cosine_lr_nonincreasing(total in 1usize..500, t in 0usize..600) {
            let opt = Adam::new(3e-4, LrDecay::CosineAnnealing, total).unwrap();
            prop_assert!(opt.lr_at(t + 1) <= opt.lr_at(t));
        }
    }
}
