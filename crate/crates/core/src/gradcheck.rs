//! Reverse-mode versus central finite-difference checks on random networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::nn::{Activation, Mlp, MlpSpec, Variant};

pub const DEFAULT_NETWORKS: usize = 100;
pub const MAX_PARAMS: usize = 200;
pub const REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
/// Denominator floor, so near-zero derivatives are compared absolutely.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkCheck {
    pub spec: MlpSpec,
    pub params: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub networks: Vec<NetworkCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.networks.iter().all(|n| n.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.networks.iter().map(|n| n.max_rel_error).fold(0.0, f64::max)
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(SCALE_FLOOR)
}

/// A random network with at most [`MAX_PARAMS`] parameters: a plain MLP with
/// at most three linear layers, or a single-block residual network.
pub fn random_spec(rng: &mut ChaCha8Rng) -> MlpSpec {
    loop {
        let input = rng.random_range(1..=4);
        let output = rng.random_range(1..=3);
        let variant = if rng.random_bool(0.25) { Variant::LnResnet } else { Variant::PlainMlp };
        let hidden: Vec<usize> = match variant {
            Variant::LnResnet => vec![rng.random_range(2..=5)],
            Variant::PlainMlp => (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=8)).collect(),
        };
        let spec = MlpSpec::new(input, hidden, output)
            .with_activation(Activation::Mish)
            .with_variant(variant);
        if spec.num_params() <= MAX_PARAMS {
            return spec;
        }
    }
}

/// Scalar probe `Σ w ⊙ tanh(y)²`, smooth in every parameter.
fn probe(net: &Mlp, x: &[f64], rows: usize, w: &[f64], grads: bool) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let spec = net.spec();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, grads);
    let xv = tape.variable(rows, spec.input_dim, x.to_vec())?;
    let y = net.forward(&mut tape, &bound, xv)?;
    let t = tape.tanh(y);
    let sq = tape.square(t);
    let wv = tape.constant(rows, spec.output_dim, w.to_vec())?;
    let p = tape.mul(sq, wv)?;
    let loss = tape.sum(p);
    let value = tape.value(loss)[0];
    if !grads {
        return Ok((value, Vec::new(), Vec::new()));
    }
    let mut g = tape.backward(loss)?;
    let gx = g.take(xv).unwrap_or_else(|| vec![0.0; x.len()]);
    Ok((value, net.grads(&mut g, &bound), gx))
}

/// Checks every parameter and input coordinate of one network.
pub fn check_network(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<NetworkCheck> {
    let mut net = Mlp::new(spec.clone(), rng)?;
    // perturb normalization gains and biases away from their initial constants
    for t in net.params_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let rows = rng.random_range(1..=3);
    let x: Vec<f64> = (0..rows * spec.input_dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let w: Vec<f64> = (0..rows * spec.output_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, gp, gx) = probe(&net, &x, rows, &w, true)?;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (pi, g) in gp.iter().enumerate() {
        for j in 0..g.len() {
            let orig = net.params()[pi].data()[j];
            net.params_mut()[pi].data_mut()[j] = orig + FD_STEP;
            let up = probe(&net, &x, rows, &w, false)?.0;
            net.params_mut()[pi].data_mut()[j] = orig - FD_STEP;
            let down = probe(&net, &x, rows, &w, false)?.0;
            net.params_mut()[pi].data_mut()[j] = orig;
            worst = worst.max(rel_error(g[j], (up - down) / (2.0 * FD_STEP)));
            coords += 1;
        }
    }
    let mut xs = x.clone();
    for j in 0..x.len() {
        xs[j] = x[j] + FD_STEP;
        let up = probe(&net, &xs, rows, &w, false)?.0;
        xs[j] = x[j] - FD_STEP;
        let down = probe(&net, &xs, rows, &w, false)?.0;
        xs[j] = x[j];
        worst = worst.max(rel_error(gx[j], (up - down) / (2.0 * FD_STEP)));
        coords += 1;
    }
    Ok(NetworkCheck {
        params: spec.num_params(),
        spec,
        coordinates: coords,
        max_rel_error: worst,
    })
}

/// Runs the check on `networks` random networks drawn from `seed`.
pub fn run_gradcheck(seed: u64, networks: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(networks);
    for _ in 0..networks {
        let spec = random_spec(&mut rng);
        out.push(check_network(spec, &mut rng)?);
    }
    Ok(GradcheckReport {
        networks: out,
        tolerance: REL_TOL,
    })
}
