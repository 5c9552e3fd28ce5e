//! Minimal fully-connected network with analytic reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>`; each layer stores its weight matrix
//! row-major with shape `(fan_out, fan_in)` followed by its bias vector. The
//! same layout is used by [`MlpGrad`] and by the checkpoint container.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Softplus,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Softmax,
    /// Identity head.
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        hidden_widths: Vec<usize>,
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_widths,
            hidden_activation,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network input and output dims must be >= 1".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::Config("network needs at least one hidden layer".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Layer sizes including input and output: `[in, h1, .., hk, out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden_widths.len() + 2);
        s.push(self.input_dim);
        s.extend_from_slice(&self.hidden_widths);
        s.push(self.output_dim);
        s
    }

    pub fn num_params(&self) -> usize {
        self.sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

fn build_layers(spec: &MlpSpec) -> Vec<Layer> {
    let mut offset = 0;
    spec.sizes()
        .windows(2)
        .map(|w| {
            let layer = Layer {
                fan_in: w[0],
                fan_out: w[1],
                weights: offset,
                bias: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            layer
        })
        .collect()
}

/// Network parameters together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    layers: Vec<Layer>,
    sizes: Vec<usize>,
}

/// Parameter gradient with the same layout as [`Mlp`]; accumulates additively.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    data: Vec<f64>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            data: vec![0.0; net.num_params()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        assert_eq!(self.data.len(), other.data.len(), "gradient layout mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Activations recorded by a forward pass; sufficient for a backward pass
/// without re-evaluating the network.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// `[x, a_1, .., a_k, y]` concatenated.
    acts: Vec<f64>,
    /// Pre-activations of every layer, concatenated.
    pre: Vec<f64>,
    sizes: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output(&self) -> &[f64] {
        let n = *self.sizes.last().unwrap_or(&0);
        &self.acts[self.acts.len() - n..]
    }

    pub fn input(&self) -> &[f64] {
        let n = self.sizes.first().copied().unwrap_or(0);
        &self.acts[..n]
    }

    fn act_offset(&self, layer: usize) -> usize {
        self.sizes[..layer].iter().sum()
    }

    fn pre_offset(&self, layer: usize) -> usize {
        self.sizes[1..=layer].iter().sum()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Numerically stable softmax, written into `out`.
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn check_input(x: &[f64], expected: usize) -> Result<()> {
    if x.len() != expected {
        return Err(Error::Dimension {
            what: "network input",
            expected,
            got: x.len(),
        });
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("network input contains {v}")));
    }
    Ok(())
}

impl Mlp {
    /// All-zero parameters.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![0.0; spec.num_params()];
        let layers = build_layers(&spec);
        let sizes = spec.sizes();
        Ok(Self {
            spec,
            params,
            layers,
            sizes,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for l in 0..net.layers.len() {
            let layer = net.layers[l];
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut net.params[layer.weights..layer.bias] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: spec.num_params(),
                got: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        let layers = build_layers(&spec);
        let sizes = spec.sizes();
        Ok(Self {
            spec,
            params,
            layers,
            sizes,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Row-major `(fan_out, fan_in)` weights of layer `l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        let layer = self.layers[l];
        &self.params[layer.weights..layer.bias]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let layer = self.layers[l];
        &mut self.params[layer.weights..layer.bias]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let layer = self.layers[l];
        &self.params[layer.bias..layer.bias + layer.fan_out]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let layer = self.layers[l];
        &mut self.params[layer.bias..layer.bias + layer.fan_out]
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let mut tape = Tape::new();
        self.forward_into(x, &mut tape)?;
        Ok((tape.output().to_vec(), tape))
    }

    /// Forward pass reusing `tape`'s buffers; the output is `tape.output()`.
    pub fn forward_into(&self, x: &[f64], tape: &mut Tape) -> Result<()> {
        check_input(x, self.spec.input_dim)?;
        if tape.sizes != self.sizes {
            tape.sizes.clone_from(&self.sizes);
        }
        let total_acts: usize = tape.sizes.iter().sum();
        let total_pre: usize = tape.sizes[1..].iter().sum();
        tape.acts.resize(total_acts, 0.0);
        tape.pre.resize(total_pre, 0.0);
        tape.acts[..x.len()].copy_from_slice(x);

        let last = self.layers.len() - 1;
        let mut a_off = 0;
        let mut p_off = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &self.params[layer.weights..layer.bias];
            let b = &self.params[layer.bias..layer.bias + layer.fan_out];
            let (head, tail) = tape.acts.split_at_mut(a_off + layer.fan_in);
            let a_in = &head[a_off..];
            let pre = &mut tape.pre[p_off..p_off + layer.fan_out];
            for o in 0..layer.fan_out {
                pre[o] = b[o] + dot(&w[o * layer.fan_in..(o + 1) * layer.fan_in], a_in);
            }
            let a_out = &mut tail[..layer.fan_out];
            if l < last {
                match self.spec.hidden_activation {
                    HiddenActivation::Softplus => {
                        a_out.iter_mut().zip(pre.iter()).for_each(|(a, &z)| *a = softplus(z))
                    }
                    HiddenActivation::Relu => {
                        a_out.iter_mut().zip(pre.iter()).for_each(|(a, &z)| *a = z.max(0.0))
                    }
                }
            } else {
                match self.spec.output_activation {
                    OutputActivation::Sigmoid => {
                        a_out.iter_mut().zip(pre.iter()).for_each(|(a, &z)| *a = sigmoid(z))
                    }
                    OutputActivation::Softmax => softmax_into(pre, a_out),
                    OutputActivation::None => a_out.copy_from_slice(pre),
                }
            }
            a_off += layer.fan_in;
            p_off += layer.fan_out;
        }
        Ok(())
    }

    fn check_tape(&self, tape: &Tape, dy: &[f64]) -> Result<()> {
        if tape.sizes != self.sizes {
            return Err(Error::Config("tape was recorded with a different network".into()));
        }
        if dy.len() != self.spec.output_dim {
            return Err(Error::Dimension {
                what: "output cotangent",
                expected: self.spec.output_dim,
                got: dy.len(),
            });
        }
        Ok(())
    }

    /// Vector-Jacobian product: returns `dx = dyᵀ ∂y/∂x` and adds
    /// `dyᵀ ∂y/∂θ` into `grad`.
    pub fn backward(&self, tape: &Tape, dy: &[f64], grad: &mut MlpGrad) -> Result<Vec<f64>> {
        self.check_tape(tape, dy)?;
        if grad.len() != self.num_params() {
            return Err(Error::Dimension {
                what: "gradient buffer",
                expected: self.num_params(),
                got: grad.len(),
            });
        }
        Ok(self.backward_impl(tape, dy, Some(&mut grad.data)))
    }

    /// Like [`Mlp::backward`] but only the input cotangent is produced.
    pub fn backward_input(&self, tape: &Tape, dy: &[f64]) -> Result<Vec<f64>> {
        self.check_tape(tape, dy)?;
        Ok(self.backward_impl(tape, dy, None))
    }

    fn backward_impl(&self, tape: &Tape, dy: &[f64], mut grad: Option<&mut Vec<f64>>) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let y = tape.output();
        let mut delta: Vec<f64> = match self.spec.output_activation {
            OutputActivation::Sigmoid => dy.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
            OutputActivation::Softmax => {
                let s = dot(dy, y);
                dy.iter().zip(y).map(|(g, y)| y * (g - s)).collect()
            }
            OutputActivation::None => dy.to_vec(),
        };
        for l in (0..=last).rev() {
            let layer = self.layers[l];
            let a_off = tape.act_offset(l);
            let a_in = &tape.acts[a_off..a_off + layer.fan_in];
            let w = &self.params[layer.weights..layer.bias];
            if let Some(g) = grad.as_deref_mut() {
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = layer.weights + o * layer.fan_in;
                        axpy(d, a_in, &mut g[row..row + layer.fan_in]);
                        g[layer.bias + o] += d;
                    }
                }
            }
            let mut da = vec![0.0; layer.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &w[o * layer.fan_in..(o + 1) * layer.fan_in], &mut da);
                }
            }
            if l == 0 {
                return da;
            }
            let p_off = tape.pre_offset(l - 1);
            let pre = &tape.pre[p_off..p_off + layer.fan_in];
            match self.spec.hidden_activation {
                HiddenActivation::Softplus => {
                    da.iter_mut().zip(pre).for_each(|(d, &z)| *d *= sigmoid(z))
                }
                HiddenActivation::Relu => da.iter_mut().zip(pre).for_each(|(d, &z)| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                }),
            }
            delta = da;
        }
        unreachable!("network has at least one layer")
    }

    /// `output_dim x input_dim` Jacobian of the outputs with respect to `x`.
    ///
    /// Row `i` is computed as the backward pass with `dy = e_i`.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut tape = Tape::new();
        self.forward_into(x, &mut tape)?;
        self.input_jacobian_from_tape(&tape)
    }

    pub fn input_jacobian_from_tape(&self, tape: &Tape) -> Result<DMatrix<f64>> {
        let (m, n) = (self.spec.output_dim, self.spec.input_dim);
        let mut jac = DMatrix::zeros(m, n);
        let mut e = vec![0.0; m];
        for i in 0..m {
            e[i] = 1.0;
            let row = self.backward_input(tape, &e)?;
            for (j, v) in row.into_iter().enumerate() {
                jac[(i, j)] = v;
            }
            e[i] = 0.0;
        }
        Ok(jac)
    }
}
