//! Feed-forward networks built on the tape.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Mish => "mish",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mish" => Ok(Activation::Mish),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Mish => tape.mish(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    PlainMlp,
    /// Input projection, then pre-norm residual blocks, then a linear head.
    LnResnet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PlainMlp => "plain_mlp",
            Variant::LnResnet => "ln_resnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain_mlp" | "mlp" => Ok(Variant::PlainMlp),
            "ln_resnet" => Ok(Variant::LnResnet),
            other => Err(Error::Config(format!("unknown network variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub variant: Variant,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Mish,
            variant: Variant::PlainMlp,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network input/output dims must be positive".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.variant == Variant::LnResnet && self.hidden_dims.is_empty() {
            return Err(Error::Config(
                "ln_resnet needs at least one hidden width".into(),
            ));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.variant {
            Variant::PlainMlp => {
                let mut dims = vec![self.input_dim];
                dims.extend(&self.hidden_dims);
                dims.push(self.output_dim);
                for (i, w) in dims.windows(2).enumerate() {
                    out.push((format!("l{i}.weight"), vec![w[0], w[1]]));
                    out.push((format!("l{i}.bias"), vec![w[1]]));
                }
            }
            Variant::LnResnet => {
                let width = self.hidden_dims[0];
                out.push(("proj.weight".into(), vec![self.input_dim, width]));
                out.push(("proj.bias".into(), vec![width]));
                for (i, &inner) in self.hidden_dims.iter().enumerate() {
                    out.push((format!("b{i}.ln.gain"), vec![width]));
                    out.push((format!("b{i}.ln.bias"), vec![width]));
                    out.push((format!("b{i}.fc1.weight"), vec![width, inner]));
                    out.push((format!("b{i}.fc1.bias"), vec![inner]));
                    out.push((format!("b{i}.fc2.weight"), vec![inner, width]));
                    out.push((format!("b{i}.fc2.bias"), vec![width]));
                }
                out.push(("head.weight".into(), vec![width, self.output_dim]));
                out.push(("head.bias".into(), vec![self.output_dim]));
            }
        }
        out
    }
}

/// Width of [`sinusoidal_embedding`].
pub const TIME_EMBED_DIM: usize = 16;

/// Sine/cosine features of a scalar noise level at geometric frequencies 0.25..32.
pub fn sinusoidal_embedding(c: f64) -> [f64; TIME_EMBED_DIM] {
    let mut out = [0.0; TIME_EMBED_DIM];
    let half = TIME_EMBED_DIM / 2;
    for i in 0..half {
        let f = 0.25 * 2f64.powi(i as i32);
        out[i] = (c * f).sin();
        out[half + i] = (c * f).cos();
    }
    out
}

/// Parameters bound onto a tape for one forward/backward round.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Uniform ±1/√fan_in initialization for linear layers; unit gain for norms.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("ln.gain") {
                vec![1.0; n]
            } else if name.ends_with("ln.bias") {
                vec![0.0; n]
            } else {
                let fan_in = if name.ends_with("weight") {
                    shape[0]
                } else {
                    // bias of the layer whose weight was pushed just before
                    params
                        .last()
                        .map(|w: &Tensor| w.shape()[0])
                        .unwrap_or(1)
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Mlp {
            spec,
            names,
            params,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let (names, params) = spec
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .unzip();
        Ok(Mlp {
            spec,
            names,
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(p, trainable)).collect())
    }

    /// Gradient per parameter (zeros where the tape recorded none).
    pub fn grads(&self, grads: &mut Gradients, bound: &Bound) -> Vec<Vec<f64>> {
        bound
            .0
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect()
    }

    fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, bound, x)?.0)
    }

    /// Output plus, for `ln_resnet`, the trunk right after the input projection.
    pub(crate) fn forward_parts(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        x: Var,
    ) -> Result<(Var, Option<(Var, Var)>)> {
        let d = tape.dims(x);
        if d.cols != self.spec.input_dim {
            return Err(Error::Dimension {
                axis: 1,
                expected: self.spec.input_dim,
                got: d.cols,
            });
        }
        let p = &bound.0;
        let act = self.spec.activation;
        match self.spec.variant {
            Variant::PlainMlp => {
                let layers = p.len() / 2;
                let mut h = x;
                for l in 0..layers {
                    h = Self::linear(tape, h, p[2 * l], p[2 * l + 1])?;
                    if l + 1 < layers {
                        h = act.apply(tape, h);
                    }
                }
                Ok((h, None))
            }
            Variant::LnResnet => {
                let proj = Self::linear(tape, x, p[0], p[1])?;
                let mut h = proj;
                for b in 0..self.spec.hidden_dims.len() {
                    let base = 2 + 6 * b;
                    let n = tape.layer_norm(h);
                    let n = tape.mul(n, p[base])?;
                    let n = tape.add(n, p[base + 1])?;
                    let u = Self::linear(tape, n, p[base + 2], p[base + 3])?;
                    let u = act.apply(tape, u);
                    let u = Self::linear(tape, u, p[base + 4], p[base + 5])?;
                    h = tape.add(h, u)?;
                }
                let head = p.len() - 2;
                let out = Self::linear(tape, h, p[head], p[head + 1])?;
                Ok((out, Some((proj, h))))
            }
        }
    }

    /// Gradient-free forward pass over `rows` stacked inputs.
    pub fn predict(&self, input: &[f64], rows: usize) -> Result<Vec<f64>> {
        let cols = if rows == 0 { 0 } else { input.len() / rows };
        if cols * rows != input.len() || cols != self.spec.input_dim {
            return Err(Error::Dimension {
                axis: 1,
                expected: self.spec.input_dim,
                got: cols,
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(rows, cols, input.to_vec())?;
        let b = self.bind(&mut tape, false);
        let y = self.forward(&mut tape, &b, x)?;
        Ok(tape.value(y).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mish_ref(x: f64) -> f64 {
        x * (1.0 + x.exp()).ln().tanh()
    }

    /// Scalar-loop forward pass for plain MLPs, independent of the tape.
    fn oracle_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let p = net.params();
        let mut h = x.to_vec();
        let layers = p.len() / 2;
        for l in 0..layers {
            let w = &p[2 * l];
            let b = &p[2 * l + 1];
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; dout];
            for j in 0..dout {
                let mut s = b.data()[j];
                for i in 0..din {
                    s += h[i] * w.data()[i * dout + j];
                }
                out[j] = if l + 1 < layers { mish_ref(s) } else { s };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(MlpSpec::new(3, vec![4], 2)).unwrap();
        let y = net.predict(&[1.0, -2.0, 3.0], 1).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_relu_passes_positive() {
        let spec = MlpSpec::new(1, vec![1], 1).with_activation(Activation::Relu);
        let mut net = Mlp::zeros(spec).unwrap();
        net.param_mut("l0.weight").unwrap().data_mut()[0] = 1.0;
        net.param_mut("l1.weight").unwrap().data_mut()[0] = 1.0;
        assert_eq!(net.predict(&[2.0], 1).unwrap(), vec![2.0]);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(MlpSpec::new(4, vec![8], 2), &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = net.predict(&x, 1).unwrap();
        let o = oracle_forward(&net, &x);
        for (a, b) in y.iter().zip(&o) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn wrong_input_width_is_axis_one_error() {
        let net = Mlp::zeros(MlpSpec::new(3, vec![4], 2)).unwrap();
        let err = net.predict(&[1.0, 2.0], 1).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: 1, expected: 3, got: 2 }));
    }

    #[test]
    fn ln_resnet_requires_hidden() {
        let spec = MlpSpec::new(2, vec![], 1).with_variant(Variant::LnResnet);
        assert!(Mlp::zeros(spec).is_err());
    }

    #[test]
    fn ln_resnet_zero_branch_is_identity_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = MlpSpec::new(3, vec![6, 6], 2).with_variant(Variant::LnResnet);
        let mut net = Mlp::new(spec, &mut rng).unwrap();
        for b in 0..2 {
            for suffix in ["fc2.weight", "fc2.bias"] {
                net.param_mut(&format!("b{b}.{suffix}"))
                    .unwrap()
                    .data_mut()
                    .fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(2, 3, vec![0.1, -0.4, 2.0, 1.0, 0.0, -3.0]).unwrap();
        let bound = net.bind(&mut tape, false);
        let (_, parts) = net.forward_parts(&mut tape, &bound, x).unwrap();
        let (proj, trunk) = parts.unwrap();
        assert_eq!(tape.value(proj), tape.value(trunk));
    }

    #[test]
    fn init_is_within_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(MlpSpec::new(16, vec![9], 1), &mut rng).unwrap();
        assert!(net.params()[0].data().iter().all(|w| w.abs() <= 0.25));
        assert!(net.params()[1].data().iter().all(|w| w.abs() <= 0.25));
        assert!(net.params()[2].data().iter().all(|w| w.abs() <= 1.0 / 3.0));
    }
}
