//! Network specifications, parameter sets and forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Mlp,
    SelfAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Gelu,
}

/// Architecture of one of the model's networks.
///
/// For [`NetworkKind::Mlp`], `depth` counts hidden layers: each is a linear map
/// followed by the activation, and a final linear map produces the output.
/// For [`NetworkKind::SelfAttention`], every input feature becomes a token of
/// width `hidden_dim`, `depth` attention blocks (attention + residual, then the
/// activation) mix the tokens, and a linear map reads out the flattened tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub depth: usize,
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn mlp(input_dim: usize, hidden_dim: usize, output_dim: usize, depth: usize) -> Self {
        Self {
            kind: NetworkKind::Mlp,
            input_dim,
            hidden_dim,
            output_dim,
            depth,
            activation: Activation::Tanh,
        }
    }

    /// Two attention blocks unless changed afterwards.
    pub fn self_attention(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            kind: NetworkKind::SelfAttention,
            input_dim,
            hidden_dim,
            output_dim,
            depth: 2,
            activation: Activation::Tanh,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return config_err("network depth must be at least 1");
        }
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return config_err(format!("network dims must be positive: {self:?}"));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in declaration order, with their fan-in
    /// (`None` for biases).
    pub fn parameter_layout(&self) -> Vec<(Vec<usize>, Option<usize>)> {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        let mut layout = Vec::new();
        match self.kind {
            NetworkKind::Mlp => {
                let mut fan_in = i;
                for _ in 0..self.depth {
                    layout.push((vec![fan_in, h], Some(fan_in)));
                    layout.push((vec![h], None));
                    fan_in = h;
                }
                layout.push((vec![h, o], Some(h)));
                layout.push((vec![o], None));
            }
            NetworkKind::SelfAttention => {
                layout.push((vec![h], Some(1)));
                layout.push((vec![i, h], Some(1)));
                for _ in 0..self.depth {
                    for _ in 0..3 {
                        layout.push((vec![h, h], Some(h)));
                    }
                }
                layout.push((vec![i * h, o], Some(i * h)));
                layout.push((vec![o], None));
            }
        }
        layout
    }
}

/// Ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet {
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.same_shape(b))
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &ParameterSet) -> Result<()> {
        if !self.same_layout(other) {
            return dim_err("parameter sets have different layouts");
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn get_flat(&self, mut index: usize) -> f64 {
        for t in &self.tensors {
            if index < t.len() {
                return t.data()[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in &mut self.tensors {
            if index < t.len() {
                t.data_mut()[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Registers every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Fan-in scaled normal initialization: weights `~ N(0, 1/fan_in)`, biases zero.
pub fn init_parameters(spec: &NetworkSpec, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = spec
        .parameter_layout()
        .into_iter()
        .map(|(shape, fan_in)| match fan_in {
            None => Tensor::zeros(shape),
            Some(fan_in) => {
                let std = (1.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| { let s: f64 = StandardNormal.sample(&mut rng); std * s })
                    .collect::<Vec<f64>>();
                Tensor::new(shape, data).expect("layout shape")
            }
        })
        .collect();
    ParameterSet::new(tensors)
}

pub fn zero_parameters(spec: &NetworkSpec) -> ParameterSet {
    ParameterSet::new(
        spec.parameter_layout()
            .into_iter()
            .map(|(shape, _)| Tensor::zeros(shape))
            .collect(),
    )
}

/// A network specification together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: ParameterSet,
}

impl Network {
    pub fn new(spec: NetworkSpec, params: ParameterSet) -> Result<Self> {
        spec.validate()?;
        let layout = spec.parameter_layout();
        let ok = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.tensors())
                .all(|((shape, _), t)| t.shape() == shape.as_slice());
        if !ok {
            return dim_err(format!("parameters do not match network layout {spec:?}"));
        }
        Ok(Self { spec, params })
    }

    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            params: init_parameters(&spec, seed),
            spec,
        })
    }

    pub fn zeroed(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            params: zero_parameters(&spec),
            spec,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Forward pass on `tape` with parameters already bound as `bound`.
    /// `input` must be `[B, input_dim]`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], input: Var) -> Result<Var> {
        let spec = &self.spec;
        match tape.value(input).shape() {
            [_, d] if *d == spec.input_dim => {}
            s => {
                return dim_err(format!(
                    "network expects [batch, {}] input, got {s:?}",
                    spec.input_dim
                ))
            }
        }
        let act = |tape: &mut Tape, v: Var| match spec.activation {
            Activation::Tanh => tape.tanh(v),
            Activation::Gelu => tape.gelu(v),
        };
        match spec.kind {
            NetworkKind::Mlp => {
                let mut h = input;
                for layer in 0..spec.depth {
                    let z = tape.linear(h, bound[2 * layer], bound[2 * layer + 1])?;
                    h = act(tape, z)?;
                }
                let k = 2 * spec.depth;
                tape.linear(h, bound[k], bound[k + 1])
            }
            NetworkKind::SelfAttention => {
                let batch = tape.value(input).shape()[0];
                let mut tokens = tape.tokenize(input, bound[0], bound[1])?;
                for layer in 0..spec.depth {
                    let base = 2 + 3 * layer;
                    let y = tape.attention(tokens, bound[base], bound[base + 1], bound[base + 2])?;
                    tokens = act(tape, y)?;
                }
                let flat = tape.reshape(tokens, vec![batch, spec.input_dim * spec.hidden_dim])?;
                let k = 2 + 3 * spec.depth;
                tape.linear(flat, bound[k], bound[k + 1])
            }
        }
    }

    /// Evaluates the network on a `[B, input_dim]` or `[input_dim]` tensor;
    /// the output has the same rank as the input.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        network_forward(&self.spec, &self.params, input)
    }
}

/// Evaluates a network without keeping the tape.
pub fn network_forward(spec: &NetworkSpec, params: &ParameterSet, input: &Tensor) -> Result<Tensor> {
    let net = Network::new(*spec, params.clone())?;
    let vector_input = input.ndim() == 1;
    let mut tape = Tape::new();
    let x = tape.leaf(input.as_matrix()?);
    let bound = net.params.bind(&mut tape);
    let y = net.forward(&mut tape, &bound, x)?;
    let out = tape.value(y).clone();
    if vector_input {
        out.reshape(vec![spec.output_dim])
    } else {
        Ok(out)
    }
}

/// `input[B, in] · weights[in, out] + bias[out]`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let w = tape.leaf(weights.clone());
    let b = tape.leaf(bias.clone());
    let y = tape.linear(x, w, b)?;
    Ok(tape.value(y).clone())
}

pub fn activation_forward(input: &Tensor, kind: Activation) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = match kind {
        Activation::Tanh => tape.tanh(x)?,
        Activation::Gelu => tape.gelu(x)?,
    };
    Ok(tape.value(y).clone())
}

/// Query/key/value projections of a single attention head, each `[d, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

/// Self-attention with residual over a `[T, d]` sequence. Returns the output
/// and the `[T, T]` attention matrix.
pub fn self_attention_forward(input: &Tensor, params: &AttentionParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let wq = tape.leaf(params.query.clone());
    let wk = tape.leaf(params.key.clone());
    let wv = tape.leaf(params.value.clone());
    let y = tape.attention(x, wq, wk, wv)?;
    let t = input.shape()[0];
    let probs = tape.attention_probs(y).expect("attention node").reshape(vec![t, t])?;
    Ok((tape.value(y).clone(), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::gelu;

    #[test]
    fn zero_mlp_outputs_zero() {
        let spec = NetworkSpec::mlp(3, 8, 2, 2);
        let net = Network::zeroed(spec).unwrap();
        let x = Tensor::from_rows(&[[0.3, -2.0, 5.0], [1.0, 1.0, 1.0]]).unwrap();
        let y = net.apply(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depth_one_mlp_is_linear_activation_linear() {
        let spec = NetworkSpec::mlp(2, 3, 1, 1);
        let net = Network::init(spec, 7).unwrap();
        let p = net.params().tensors();
        let x = [0.4, -0.7];
        let mut expected = p[3].data()[0];
        for j in 0..3 {
            let pre = p[1].data()[j] + x[0] * p[0].data()[j] + x[1] * p[0].data()[3 + j];
            expected += pre.tanh() * p[2].data()[j];
        }
        let y = net.apply(&Tensor::vector(x.to_vec())).unwrap();
        assert_eq!(y.shape(), &[1]);
        assert!((y.data()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn output_shape_contract() {
        for spec in [
            NetworkSpec::mlp(4, 16, 3, 2),
            NetworkSpec::self_attention(4, 8, 3),
            NetworkSpec::mlp(4, 16, 3, 3).with_activation(Activation::Gelu),
        ] {
            let net = Network::init(spec, 1).unwrap();
            let y = net.apply(&Tensor::filled(vec![5, 4], 0.1)).unwrap();
            assert_eq!(y.shape(), &[5, 3]);
        }
    }

    #[test]
    fn wrong_input_dim_is_dimension_error() {
        let net = Network::init(NetworkSpec::mlp(4, 16, 3, 2), 1).unwrap();
        assert!(matches!(
            net.apply(&Tensor::zeros(vec![2, 5])),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(NetworkSpec::mlp(4, 16, 3, 0).validate().is_err());
        assert!(NetworkSpec::mlp(0, 16, 3, 1).validate().is_err());
        assert_eq!(NetworkSpec::self_attention(2, 4, 2).depth, 2);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = NetworkSpec::mlp(5, 7, 2, 2);
        let a = init_parameters(&spec, 42);
        let b = init_parameters(&spec, 42);
        assert_eq!(a, b);
        let bits = |p: &ParameterSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, init_parameters(&spec, 43));
        for (t, (_, fan_in)) in a.tensors().iter().zip(spec.parameter_layout()) {
            if fan_in.is_none() {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_variance_matches_fan_in() {
        // 64 x 157 ≈ 10⁴ weights drawn with variance 1/64
        let spec = NetworkSpec::mlp(64, 157, 1, 1);
        let p = init_parameters(&spec, 3);
        let w = p.tensors()[0].data();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 1.0 / 64.0;
        assert!((var - target).abs() <= 0.2 * target, "variance {var}");
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // exact GELU(1) = 0.841344746...; the tanh form is within 1e-3
        assert!((gelu(1.0) - 0.841_344_746).abs() < 1e-3);
        assert!((gelu(-1.0) + 0.158_655_254).abs() < 1e-3);
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let net = Network::init(NetworkSpec::self_attention(3, 4, 2), 9).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3], [-1.0, 0.5, 0.0]]).unwrap();
        let a = net.apply(&x).unwrap();
        let b = net.apply(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
