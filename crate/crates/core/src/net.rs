//! Dense feed-forward network with hand-written backpropagation.
//!
//! Parameters live in a single flat vector. Canonical layout, layer by layer:
//! the weight matrix of shape `n_out x n_in` stored row-major (entry `(o, i)`
//! at offset `o * n_in + i`), followed by the `n_out` biases. Hidden layers
//! apply the configured activation; the output layer is linear.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let a = z.tanh();
                1.0 - a * a
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::InvalidSpec(format!("unknown activation {other:?}"))),
        }
    }
}

/// Layer sizes (input, hidden..., output) plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl NetSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::InvalidSpec(format!(
                "need input, at least one hidden and an output layer, got sizes {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!("zero-width layer in {layer_sizes:?}")));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn max_width(&self) -> usize {
        self.layer_sizes.iter().copied().max().unwrap_or(0)
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> impl Iterator<Item = Layer> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let layer = Layer {
                n_in: w[0],
                n_out: w[1],
                offset,
            };
            offset += w[0] * w[1] + w[1];
            layer
        })
    }

    /// Fan-balanced uniform initialization; biases start at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        for layer in self.layers() {
            let a = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for w in &mut values[layer.weights()] {
                *w = rng.random_range(-a..a);
            }
        }
        ParamVector(values)
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector(vec![0.0; self.param_count()])
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    n_in: usize,
    n_out: usize,
    offset: usize,
}

impl Layer {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_in * self.n_out
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.n_in * self.n_out;
        start..start + self.n_out
    }
}

/// Flat parameter vector in canonical layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl Deref for ParamVector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

/// Gradient with the same layout as [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradVector(pub Vec<f64>);

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }
}

impl Deref for GradVector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for GradVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

/// Activations recorded during a forward pass, consumed by [`backward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `inputs[l]` is the input vector to layer `l`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
}

fn affine(layer: &Layer, params: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let w = &params[layer.weights()];
    let b = &params[layer.biases()];
    out.clear();
    out.extend(
        w.chunks_exact(layer.n_in)
            .zip(b)
            .map(|(row, bias)| row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>() + bias),
    );
}

pub fn forward(spec: &NetSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_input(input)?;
    let n = spec.num_layers();
    let mut x = input.to_vec();
    let mut z = Vec::with_capacity(spec.max_width());
    for (l, layer) in spec.layers().enumerate() {
        affine(&layer, params, &x, &mut z);
        if l + 1 < n {
            for v in z.iter_mut() {
                *v = spec.activation.apply(*v);
            }
        }
        std::mem::swap(&mut x, &mut z);
    }
    Ok(x)
}

/// Forward pass that keeps what backpropagation needs.
pub fn forward_tape(spec: &NetSpec, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, Tape)> {
    spec.check_params(params)?;
    spec.check_input(input)?;
    let n = spec.num_layers();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n - 1);
    let mut x = input.to_vec();
    for (l, layer) in spec.layers().enumerate() {
        let mut z = Vec::with_capacity(layer.n_out);
        affine(&layer, params, &x, &mut z);
        inputs.push(x);
        if l + 1 < n {
            x = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(z);
        } else {
            x = z;
        }
    }
    Ok((x, Tape { inputs, pre }))
}

/// Accumulates the gradient of `<upstream, f(params, input)>` into `grad` and
/// returns the gradient with respect to the input.
pub fn backward_tape(
    spec: &NetSpec,
    params: &[f64],
    tape: &Tape,
    upstream: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    if grad.len() != params.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient accumulator",
            expected: params.len(),
            got: grad.len(),
        });
    }
    if upstream.len() != spec.output_dim() {
        return Err(Error::DimensionMismatch {
            what: "upstream gradient",
            expected: spec.output_dim(),
            got: upstream.len(),
        });
    }
    let layers: Vec<Layer> = spec.layers().collect();
    let mut delta = upstream.to_vec();
    for l in (0..layers.len()).rev() {
        let layer = layers[l];
        if l + 1 < layers.len() {
            for (d, &z) in delta.iter_mut().zip(&tape.pre[l]) {
                *d *= spec.activation.derivative(z);
            }
        }
        let input = &tape.inputs[l];
        let (gw, gb) = grad[layer.offset..layer.biases().end].split_at_mut(layer.n_in * layer.n_out);
        for ((grow, gbias), &d) in gw.chunks_exact_mut(layer.n_in).zip(gb.iter_mut()).zip(&delta) {
            *gbias += d;
            for (g, &xi) in grow.iter_mut().zip(input) {
                *g += d * xi;
            }
        }
        let w = &params[layer.weights()];
        let mut next = vec![0.0; layer.n_in];
        for (row, &d) in w.chunks_exact(layer.n_in).zip(&delta) {
            for (nx, &wi) in next.iter_mut().zip(row) {
                *nx += wi * d;
            }
        }
        delta = next;
    }
    Ok(delta)
}

/// Exact gradients of `<upstream, forward(params, input)>` with respect to
/// the parameters and the input.
pub fn backward(spec: &NetSpec, params: &[f64], input: &[f64], upstream: &[f64]) -> Result<(GradVector, Vec<f64>)> {
    let (_, tape) = forward_tape(spec, params, input)?;
    let mut grad = GradVector::zeros(params.len());
    let input_grad = backward_tape(spec, params, &tape, upstream, &mut grad)?;
    Ok((grad, input_grad))
}
