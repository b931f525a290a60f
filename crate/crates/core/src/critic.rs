//! Twin Q networks and the double-Q Bellman target.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Mlp, MlpSpec};
use crate::tensor::ema_update;

/// Which critic feeds the policy's Q term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyQ {
    First,
    /// Q₁ or Q₂ with equal probability, redrawn every batch.
    RandomPerBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticIndex {
    Q1,
    Q2,
}

#[derive(Clone, Debug)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub ema_alpha: f64,
    pub gamma: f64,
    pub q_norm: bool,
    pub max_q_backup: bool,
    pub backup_samples: usize,
    pub policy_q: PolicyQ,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Per-critic statistics from one regression step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticStats {
    pub loss: f64,
    pub mean_q1: f64,
    pub mean_target: f64,
}

impl CriticPair {
    /// Two independently initialized critics; `spec` dims are overwritten.
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, mut spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.input_dim = state_dim + action_dim;
        spec.output_dim = 1;
        let q1 = Mlp::new(spec.clone(), rng)?;
        let q2 = Mlp::new(spec, rng)?;
        Ok(CriticPair {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            ema_alpha: 0.995,
            gamma: 0.99,
            q_norm: false,
            max_q_backup: false,
            backup_samples: 10,
            policy_q: PolicyQ::First,
            state_dim,
            action_dim,
        })
    }

    /// Default critic backbone: relu MLP.
    pub fn default_spec(hidden: Vec<usize>) -> MlpSpec {
        MlpSpec::new(0, hidden, 1).with_activation(Activation::Relu)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.backup_samples == 0 {
            return Err(Error::Config("backup_samples must be positive".into()));
        }
        Ok(())
    }

    fn stack(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, usize)> {
        let rows = s.len() / self.state_dim.max(1);
        if rows * self.state_dim != s.len() || a.len() != rows * self.action_dim {
            return Err(Error::Dimension {
                axis: 0,
                expected: rows * self.action_dim,
                got: a.len(),
            });
        }
        let mut out = Vec::with_capacity(rows * (self.state_dim + self.action_dim));
        for r in 0..rows {
            out.extend_from_slice(&s[r * self.state_dim..(r + 1) * self.state_dim]);
            out.extend_from_slice(&a[r * self.action_dim..(r + 1) * self.action_dim]);
        }
        Ok((out, rows))
    }

    /// Gradient-free Q values of one network.
    pub fn q_values(&self, net: &Mlp, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let (x, rows) = self.stack(s, a)?;
        net.predict(&x, rows)
    }

    /// Pointwise min of the two online critics.
    pub fn min_q(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let q1 = self.q_values(&self.q1, s, a)?;
        let q2 = self.q_values(&self.q2, s, a)?;
        Ok(q1.iter().zip(&q2).map(|(x, y)| x.min(*y)).collect())
    }

    /// `r + γ(1 − done)·min_i Q_i^⊤(s', a')`, with `a'` drawn by `next_action`
    /// from the target policy. `next_action` receives row-stacked next states
    /// and returns row-stacked actions.
    pub fn bellman_target(
        &self,
        batch: &Batch,
        next_action: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let rows = batch.len();
        if rows == 0 {
            return Err(Error::Contract("bellman target of an empty batch".into()));
        }
        let sd = self.state_dim;
        let m = if self.max_q_backup { self.backup_samples } else { 1 };
        let mut next = Vec::with_capacity(rows * m * sd);
        for r in 0..rows {
            for _ in 0..m {
                next.extend_from_slice(&batch.next_states[r * sd..(r + 1) * sd]);
            }
        }
        let a = next_action(&next)?;
        let q1 = self.q_values(&self.q1_target, &next, &a)?;
        let q2 = self.q_values(&self.q2_target, &next, &a)?;
        let mut target = Vec::with_capacity(rows);
        for r in 0..rows {
            let block = r * m..(r + 1) * m;
            let m1 = q1[block.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let m2 = q2[block].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let boot = m1.min(m2);
            target.push(batch.rewards[r] + self.gamma * (1.0 - batch.dones[r]) * boot);
        }
        if self.q_norm {
            normalize(&mut target);
        }
        Ok(target)
    }

    /// Mean over the batch of `(y − Q₁)² + (y − Q₂)²`, and gradients for (Q₁, Q₂).
    pub fn critic_loss(&self, batch: &Batch, targets: &[f64]) -> Result<(CriticStats, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let rows = batch.len();
        if targets.len() != rows {
            return Err(Error::Dimension {
                axis: 0,
                expected: rows,
                got: targets.len(),
            });
        }
        let (x, _) = self.stack(&batch.states, &batch.actions)?;
        let mut tape = Tape::new();
        let b1 = self.q1.bind(&mut tape, true);
        let b2 = self.q2.bind(&mut tape, true);
        let xv = tape.constant(rows, self.state_dim + self.action_dim, x)?;
        let y = tape.constant(rows, 1, targets.to_vec())?;
        let q1 = self.q1.forward(&mut tape, &b1, xv)?;
        let q2 = self.q2.forward(&mut tape, &b2, xv)?;
        let mean_q1 = tape.value(q1).iter().sum::<f64>() / rows as f64;
        let d1 = tape.sub(y, q1)?;
        let d2 = tape.sub(y, q2)?;
        let e1 = tape.square(d1);
        let e2 = tape.square(d2);
        let e = tape.add(e1, e2)?;
        let loss = tape.mean(e);
        let value = tape.value(loss)[0];
        let mut g = tape.backward(loss)?;
        Ok((
            CriticStats {
                loss: value,
                mean_q1,
                mean_target: targets.iter().sum::<f64>() / rows as f64,
            },
            self.q1.grads(&mut g, &b1),
            self.q2.grads(&mut g, &b2),
        ))
    }

    pub fn pick_policy_critic<R: Rng + ?Sized>(&self, rng: &mut R) -> CriticIndex {
        match self.policy_q {
            PolicyQ::First => CriticIndex::Q1,
            PolicyQ::RandomPerBatch => {
                if rng.random::<bool>() {
                    CriticIndex::Q1
                } else {
                    CriticIndex::Q2
                }
            }
        }
    }

    pub fn net(&self, which: CriticIndex) -> &Mlp {
        match which {
            CriticIndex::Q1 => &self.q1,
            CriticIndex::Q2 => &self.q2,
        }
    }

    /// Per-sample `Q(s, a)` on a tape; `bound` should be bound non-trainable so
    /// gradients only flow into `a`.
    pub fn q_value_for_policy(
        &self,
        tape: &mut Tape<'_>,
        which: CriticIndex,
        bound: &Bound,
        s: Var,
        a: Var,
    ) -> Result<Var> {
        let x = tape.concat_cols(&[s, a])?;
        self.net(which).forward(tape, bound, x)
    }

    pub fn update_targets(&mut self) -> Result<()> {
        ema_update(self.q1_target.params_mut(), self.q1.params(), self.ema_alpha)?;
        ema_update(self.q2_target.params_mut(), self.q2.params(), self.ema_alpha)
    }
}

/// Standardizes in place to zero mean and unit (population) standard deviation,
/// dividing by `max(σ, 1e-6)`.
pub fn normalize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-6);
    for x in v.iter_mut() {
        *x = (*x - mean) / sd;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64) -> CriticPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CriticPair::new(2, 1, CriticPair::default_spec(vec![8, 8]), &mut rng).unwrap()
    }

    fn batch(rows: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        Batch {
            obs_dim: 2,
            act_dim: 1,
            states: u(rows * 2),
            actions: u(rows),
            rewards: u(rows),
            next_states: u(rows * 2),
            dones: vec![0.0; rows],
        }
    }

    /// Sets the target critics to output the constant `c`.
    fn constant_targets(p: &mut CriticPair, c: f64) {
        for net in [&mut p.q1_target, &mut p.q2_target] {
            for t in net.params_mut() {
                t.data_mut().fill(0.0);
            }
            let last = net.names().len() - 1;
            net.params_mut()[last].data_mut()[0] = c;
        }
    }

    fn zero_action(next: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; next.len() / 2])
    }

    #[test]
    fn gamma_zero_gives_rewards() {
        let mut p = pair(0);
        p.gamma = 0.0;
        let b = batch(5, 1);
        assert_eq!(p.bellman_target(&b, &mut zero_action).unwrap(), b.rewards);
    }

    #[test]
    fn terminal_masks_bootstrap() {
        let p = pair(0);
        let mut b = batch(5, 1);
        b.dones = vec![1.0; 5];
        assert_eq!(p.bellman_target(&b, &mut zero_action).unwrap(), b.rewards);
    }

    #[test]
    fn bootstrap_arithmetic() {
        let mut p = pair(0);
        constant_targets(&mut p, 10.0);
        let mut b = batch(1, 1);
        b.rewards = vec![1.0];
        let t = p.bellman_target(&b, &mut zero_action).unwrap();
        assert!((t[0] - 10.9).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_contract_error() {
        let p = pair(0);
        assert!(matches!(
            p.bellman_target(&Batch::default(), &mut zero_action),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn target_uses_min_of_target_critics() {
        let p = pair(3);
        let b = batch(6, 4);
        let t = p.bellman_target(&b, &mut zero_action).unwrap();
        let a = vec![0.0; 6];
        let q1 = p.q_values(&p.q1_target, &b.next_states, &a).unwrap();
        let q2 = p.q_values(&p.q2_target, &b.next_states, &a).unwrap();
        for r in 0..6 {
            let expect = b.rewards[r] + 0.99 * q1[r].min(q2[r]);
            assert!((t[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_backup_sample_matches_plain_path() {
        let mut p = pair(5);
        let b = batch(8, 6);
        let draw = |seed: u64| {
            move |next: &[f64]| -> Result<Vec<f64>> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((0..next.len() / 2).map(|_| rng.random_range(-1.0..1.0)).collect())
            }
        };
        let plain = p.bellman_target(&b, &mut draw(9)).unwrap();
        p.max_q_backup = true;
        p.backup_samples = 1;
        let backed = p.bellman_target(&b, &mut draw(9)).unwrap();
        assert_eq!(plain, backed);
    }

    #[test]
    fn max_backup_takes_per_critic_max_then_min() {
        let mut p = pair(5);
        p.max_q_backup = true;
        p.backup_samples = 3;
        let b = batch(2, 6);
        let acts = [0.9, -0.4, 0.1, -0.7, 0.3, 0.8];
        let t = p.bellman_target(&b, &mut |_n: &[f64]| Ok(acts.to_vec())).unwrap();
        for r in 0..2 {
            let s: Vec<f64> = (0..3).flat_map(|_| b.next_states[r * 2..r * 2 + 2].to_vec()).collect();
            let a = &acts[r * 3..r * 3 + 3];
            let q1 = p.q_values(&p.q1_target, &s, a).unwrap();
            let q2 = p.q_values(&p.q2_target, &s, a).unwrap();
            let m1 = q1.iter().copied().fold(f64::MIN, f64::max);
            let m2 = q2.iter().copied().fold(f64::MIN, f64::max);
            assert!((t[r] - (b.rewards[r] + 0.99 * m1.min(m2))).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_targets_under_q_norm_are_finite() {
        let mut p = pair(0);
        p.gamma = 0.0;
        p.q_norm = true;
        let mut b = batch(4, 1);
        b.rewards = vec![2.0; 4];
        assert_eq!(p.bellman_target(&b, &mut zero_action).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn critic_loss_definition() {
        let mut p = pair(0);
        for net in [&mut p.q1, &mut p.q2] {
            for t in net.params_mut() {
                t.data_mut().fill(0.0);
            }
        }
        let last = p.q1.names().len() - 1;
        p.q1.params_mut()[last].data_mut()[0] = 1.0;
        let b = batch(1, 0);
        let (st, _, _) = p.critic_loss(&b, &[0.0]).unwrap();
        assert_eq!(st.loss, 1.0);
        p.q1.params_mut()[last].data_mut()[0] = 0.0;
        let (st, _, _) = p.critic_loss(&b, &[0.0]).unwrap();
        assert_eq!(st.loss, 0.0);
    }

    #[test]
    fn critic_loss_matches_recomputation() {
        let p = pair(11);
        let b = batch(7, 12);
        let y: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
        let (st, _, _) = p.critic_loss(&b, &y).unwrap();
        let q1 = p.q_values(&p.q1, &b.states, &b.actions).unwrap();
        let q2 = p.q_values(&p.q2, &b.states, &b.actions).unwrap();
        let expect: f64 = (0..7).map(|i| (y[i] - q1[i]).powi(2) + (y[i] - q2[i]).powi(2)).sum::<f64>() / 7.0;
        assert!((st.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn policy_q_gradient_flows_to_action_only() {
        let p = pair(2);
        let mut tape = Tape::new();
        let bound = p.q1.bind(&mut tape, false);
        let s = tape.constant(1, 2, vec![0.2, -0.1]).unwrap();
        let a = tape.variable(1, 1, vec![0.3]).unwrap();
        let q = p.q_value_for_policy(&mut tape, CriticIndex::Q1, &bound, s, a).unwrap();
        let q = tape.sum(q);
        let g = tape.backward(q).unwrap();
        assert!(g.get(a).is_some());
        for v in bound.vars() {
            assert!(g.get(*v).is_none());
        }
    }

    #[test]
    fn linear_critic_action_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec::new(0, vec![], 1);
        let mut p = CriticPair::new(2, 1, spec, &mut rng).unwrap();
        let w: Vec<f64> = p.q1.params()[0].data().to_vec();
        let q = |p: &CriticPair, a: f64| p.q_values(&p.q1, &[0.5, -0.5], &[a]).unwrap()[0];
        let mut tape = Tape::new();
        let bound = p.q1.bind(&mut tape, false);
        let s = tape.constant(1, 2, vec![0.5, -0.5]).unwrap();
        let a = tape.variable(1, 1, vec![0.2]).unwrap();
        let out = p.q_value_for_policy(&mut tape, CriticIndex::Q1, &bound, s, a).unwrap();
        let out = tape.sum(out);
        let g = tape.backward(out).unwrap().get(a).unwrap()[0];
        let h = 1e-5;
        let fd = (q(&p, 0.2 + h) - q(&p, 0.2 - h)) / (2.0 * h);
        assert!((g - fd).abs() < 1e-5);
        assert!((g - w[2]).abs() < 1e-12);
        p.q1.params_mut()[0].data_mut().fill(0.0);
        assert_eq!(q(&p, 0.7), p.q1.params()[1].data()[0]);
    }

    proptest! {
        #[test]
        fn q_norm_standardizes(v in prop::collection::vec(-100.0f64..100.0, 2..64)) {
            let spread = v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let mut w = v.clone();
            normalize(&mut w);
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((sd - 1.0).abs() < 1e-10);
        }

        #[test]
        fn double_q_min_is_conservative(seed in 0u64..1000) {
            let p = pair(seed);
            let b = batch(16, seed + 1);
            let m = p.min_q(&b.states, &b.actions).unwrap();
            let q1 = p.q_values(&p.q1, &b.states, &b.actions).unwrap();
            let q2 = p.q_values(&p.q2, &b.states, &b.actions).unwrap();
            for i in 0..16 {
                prop_assert!(m[i] <= q1[i] && m[i] <= q2[i]);
            }
        }
    }
}
