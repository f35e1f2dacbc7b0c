//! Dense feed-forward networks on top of the tape.
//!
//! An [`MlpParams`] owns its weights as plain [`Tensor`]s. For a differentiable
//! pass the parameters are first *bound* to a tape (one leaf per tensor) and
//! the forward graph references those leaves, so a single backward pass yields
//! both parameter and input gradients. [`mlp_eval`] is the no-tape fast path
//! for pure value queries.

use super::checkpoint::NamedTensor;
use super::tape::{Gradients, NodeId, Tape};
use super::tensor::Tensor;
use crate::rng::RngStream;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    /// Weight matrices, one per layer: [fan_in, fan_out].
    pub weights: Vec<Tensor>,
    /// Bias rows, one per layer: [1, fan_out].
    pub biases: Vec<Tensor>,
    /// Applied between layers; the final layer output is linear.
    pub activation: Activation,
}

/// Tape leaves for one bound parameter set, in `parameters()` order.
#[derive(Debug, Clone)]
pub struct MlpBinding {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl MlpParams {
    /// Build a network with the given layer sizes, e.g. `[4, 64, 64, 1]`.
    /// Weights and biases are uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "mlp needs at least input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("mlp layer sizes must be nonzero: {sizes:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            weights.push(Tensor::uniform_init(vec![fan_in, fan_out], fan_in, rng));
            biases.push(Tensor::uniform_init(vec![1, fan_out], fan_in, rng));
        }
        Ok(MlpParams { weights, biases, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().shape[1]
    }

    /// All parameter tensors in a fixed order (w0, b0, w1, b1, ...).
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Register every parameter as a leaf. `trainable` decides whether those
    /// leaves participate in backward (a frozen critic binds with `false`).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpBinding {
        let reg = |t: &Tensor, tape: &mut Tape| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            tape.leaf(&t)
        };
        MlpBinding {
            weights: self.weights.iter().map(|w| reg(w, tape)).collect(),
            biases: self.biases.iter().map(|b| reg(b, tape)).collect(),
        }
    }

    /// Forward through pre-bound leaves. `input` is a [batch, fan_in] node.
    pub fn apply(&self, tape: &mut Tape, binding: &MlpBinding, input: NodeId) -> NodeId {
        let mut h = input;
        let last = self.weights.len() - 1;
        for i in 0..self.weights.len() {
            let z = tape.matmul(h, binding.weights[i]);
            h = tape.add_row(z, binding.biases[i]);
            if i < last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Gelu => tape.gelu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        h
    }
}

/// Differentiable forward pass: binds the parameters as trainable leaves and
/// returns the output node. Validates the input width against the first layer.
pub fn mlp_forward(params: &MlpParams, input: &Tensor, tape: &mut Tape) -> Result<NodeId> {
    let (_, c) = input.dims2();
    if c != params.input_dim() {
        return Err(Error::Config(format!(
            "mlp input width {c} does not match first layer fan_in {}",
            params.input_dim()
        )));
    }
    let x = tape.leaf(input);
    let binding = params.bind(tape, true);
    Ok(params.apply(tape, &binding, x))
}

/// Gradient slices for a bound parameter set, aligned with `parameters()`
/// order (w0, b0, w1, b1, ...) — the layout `adam_param_step` expects.
pub fn binding_grads<'g>(binding: &MlpBinding, grads: &'g Gradients) -> Vec<Option<&'g [f64]>> {
    let mut out = Vec::with_capacity(2 * binding.weights.len());
    for i in 0..binding.weights.len() {
        out.push(grads.wrt(binding.weights[i]));
        out.push(grads.wrt(binding.biases[i]));
    }
    out
}

/// Name a network's tensors for checkpointing: `<prefix>.w0`, `<prefix>.b0`, …
pub fn pack_mlp(prefix: &str, params: &MlpParams) -> Vec<NamedTensor> {
    let mut out = Vec::with_capacity(2 * params.weights.len());
    for i in 0..params.weights.len() {
        out.push(NamedTensor {
            name: format!("{prefix}.w{i}"),
            tensor: params.weights[i].clone(),
        });
        out.push(NamedTensor {
            name: format!("{prefix}.b{i}"),
            tensor: params.biases[i].clone(),
        });
    }
    out
}

/// Rebuild a network from `pack_mlp`-style names. Layer count is inferred
/// from the contiguous `w0..wN` run present under the prefix.
pub fn unpack_mlp(
    prefix: &str,
    tensors: &[NamedTensor],
    activation: Activation,
) -> Result<MlpParams> {
    let find = |name: &str| tensors.iter().find(|t| t.name == name).map(|t| t.tensor.clone());
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    loop {
        let i = weights.len();
        match (find(&format!("{prefix}.w{i}")), find(&format!("{prefix}.b{i}"))) {
            (Some(w), Some(b)) => {
                weights.push(w);
                biases.push(b);
            }
            (None, None) => break,
            _ => {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("checkpoint has a dangling weight/bias pair at {prefix}.{i}"),
                });
            }
        }
    }
    if weights.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("checkpoint holds no tensors under prefix {prefix:?}"),
        });
    }
    Ok(MlpParams { weights, biases, activation })
}

/// Value-only forward pass for a single input row. No tape, no gradients.
pub fn mlp_eval(params: &MlpParams, input: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), params.input_dim(), "mlp_eval input width");
    let mut h = input.to_vec();
    let last = params.weights.len() - 1;
    for i in 0..params.weights.len() {
        let w = &params.weights[i];
        let b = &params.biases[i];
        let (fan_in, fan_out) = (w.shape[0], w.shape[1]);
        let mut out = b.values.clone();
        for (k, &hv) in h.iter().enumerate().take(fan_in) {
            if hv != 0.0 {
                let wrow = &w.values[k * fan_out..(k + 1) * fan_out];
                for j in 0..fan_out {
                    out[j] += hv * wrow[j];
                }
            }
        }
        if i < last {
            for v in out.iter_mut() {
                *v = match params.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Gelu => {
                        let x = *v;
                        0.5 * x
                            * (1.0
                                + (0.797_884_560_802_865_4
                                    * (x + 0.044_715 * x * x * x))
                                    .tanh())
                    }
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        h = out;
    }
    h
}
