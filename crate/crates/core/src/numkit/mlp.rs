//! Sequential dense networks with a recorded tape for exact reverse-mode
//! gradients.
//!
//! A forward pass records every pre-activation, activation and gate. The tape
//! is bound to the parameter revision it was recorded against; any parameter
//! mutation issues a fresh revision, so a stale tape is rejected instead of
//! silently producing wrong gradients.
//!
//! Hidden layers may carry a multiplicative gate: `h = act(x·W + b) ∘ g`, with
//! `g` a `(batch, out)` matrix. Conditioning networks use this slot.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::{Error, Result};

static NEXT_REVISION: AtomicU64 = AtomicU64::new(1);

fn fresh_revision() -> u64 {
    NEXT_REVISION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Elu,
    Softplus,
    Relu,
    Linear,
    Softmax,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Elu,
        Activation::Softplus,
        Activation::Relu,
        Activation::Linear,
        Activation::Softmax,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Softmax => "softmax",
        }
    }

    /// Scalar activation; softmax is row-wise and handled separately.
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Relu => x.max(0.0),
            Activation::Linear | Activation::Softmax => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
            Activation::Softplus => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear | Activation::Softmax => 1.0,
        }
    }

    fn he_initialized(self) -> bool {
        matches!(
            self,
            Activation::Elu | Activation::Softplus | Activation::Relu
        )
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Activation::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown activation `{s}`")))
    }
}

/// One entry of a layer chain: `in_dim -> out_dim` followed by `activation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    /// Builds a chain from widths `[in, h1, ..., out]`: every hidden layer
    /// uses `hidden`, the last layer uses `output`.
    pub fn chain(widths: &[usize], hidden: Activation, output: Activation) -> Vec<LayerSpec> {
        let last = widths.len().saturating_sub(2);
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec::new(w[0], w[1], if i == last { output } else { hidden }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `(in_dim, out_dim)`, row-major.
    weights: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Shape("layer weights must be a matrix".into()));
        }
        if bias.len() != weights.cols() {
            return Err(Error::Shape(format!(
                "bias width {} does not match output width {}",
                bias.len(),
                weights.cols()
            )));
        }
        let bias = bias.reshape(vec![weights.cols()])?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.in_dim(), self.out_dim(), self.activation)
    }
}

/// A fixed-topology feed-forward network.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    revision: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    revision: u64,
    input: Tensor,
    pre: Vec<Tensor>,
    act: Vec<Tensor>,
    gates: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    /// Activation of layer `i` before its gate.
    pub fn activation(&self, i: usize) -> &Tensor {
        &self.act[i]
    }

    pub fn output(&self) -> &Tensor {
        self.act.last().expect("tape of a non-empty network")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
    pub input: Tensor,
    /// Gradient w.r.t. each gate that was supplied in the forward pass.
    pub gates: Vec<Option<Tensor>>,
}

impl MlpGrads {
    /// Parameter gradients in the same order as [`Parameterized::param_slices`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.data()])
            .collect()
    }
}

/// Anything exposing its trainable parameters as a fixed, ordered list of
/// flat slices. Optimizers key their moment buffers on this order.
pub trait Parameterized {
    fn param_slices(&self) -> Vec<&[f64]>;

    /// Mutable view; implementations must invalidate outstanding tapes.
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_lens(&self) -> Vec<usize> {
        self.param_slices().iter().map(|s| s.len()).collect()
    }

    /// SHA-256 over the little-endian bit patterns of every parameter.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.param_slices() {
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        validate_chain(&layers.iter().map(DenseLayer::spec).collect::<Vec<_>>())?;
        Ok(Self {
            layers,
            revision: fresh_revision(),
        })
    }

    /// He-normal weights for ELU/Softplus/ReLU layers, Glorot-uniform for
    /// Linear/Softmax layers, zero biases.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        validate_chain(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let n = s.in_dim * s.out_dim;
                let data: Vec<f64> = if s.activation.he_initialized() {
                    let std = (2.0 / s.in_dim as f64).sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut *rng);
                            std * z
                        })
                        .collect()
                } else {
                    let limit = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit)
                        .expect("finite positive Glorot limit");
                    (0..n).map(|_| dist.sample(&mut *rng)).collect()
                };
                DenseLayer {
                    weights: Tensor::from_parts(vec![s.in_dim, s.out_dim], data),
                    bias: Tensor::zeros(vec![s.out_dim]),
                    activation: s.activation,
                }
            })
            .collect();
        Ok(Self {
            layers,
            revision: fresh_revision(),
        })
    }

    /// A network with every parameter set to zero.
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_chain(specs)?;
        let layers = specs
            .iter()
            .map(|s| DenseLayer {
                weights: Tensor::zeros(vec![s.in_dim, s.out_dim]),
                bias: Tensor::zeros(vec![s.out_dim]),
                activation: s.activation,
            })
            .collect();
        Ok(Self {
            layers,
            revision: fresh_revision(),
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(DenseLayer::spec).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Overwrites one layer's parameters; `weights` is `(in, out)` row-major.
    pub fn set_layer(&mut self, index: usize, weights: &[f64], bias: &[f64]) -> Result<()> {
        let layer = self
            .layers
            .get_mut(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {index}")))?;
        if weights.len() != layer.weights.len() || bias.len() != layer.bias.len() {
            return Err(Error::Shape(format!("layer {index} parameter sizes")));
        }
        if !weights.iter().chain(bias).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("layer {index} parameters")));
        }
        layer.weights.data_mut().copy_from_slice(weights);
        layer.bias.data_mut().copy_from_slice(bias);
        self.revision = fresh_revision();
        Ok(())
    }

    /// Clamps every parameter into `[-c, c]`.
    pub fn clip_params(&mut self, c: f64) {
        for s in self.param_slices_mut() {
            for v in s.iter_mut() {
                *v = v.clamp(-c, c);
            }
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape)> {
        self.forward_gated(input, &[])
    }

    /// Forward pass. `gates[i]`, when present, multiplies the activation of
    /// hidden layer `i` elementwise; it must be `(batch, out_i)`. `gates` may
    /// be shorter than the layer list.
    pub fn forward_gated(
        &self,
        input: &Tensor,
        gates: &[Option<&Tensor>],
    ) -> Result<(Tensor, Tape)> {
        if input.shape().len() != 2 || input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects (batch, {}), got {:?}",
                self.input_dim(),
                input.shape()
            )));
        }
        if gates.len() > self.layers.len() {
            return Err(Error::Shape("more gates than layers".into()));
        }
        if gates.len() == self.layers.len() && gates[gates.len() - 1].is_some() {
            return Err(Error::Contract("the output layer cannot be gated".into()));
        }
        let batch = input.rows();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len());
        let mut kept_gates = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.weights)?;
            for row in z.data_mut().chunks_exact_mut(layer.out_dim()) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            let a = if layer.activation == Activation::Softmax {
                softmax_rows(&z)
            } else {
                z.map(|v| layer.activation.apply(v))
            };
            let gate = gates.get(i).copied().flatten();
            current = match gate {
                Some(g) => {
                    if g.shape() != [batch, layer.out_dim()] {
                        return Err(Error::Shape(format!(
                            "gate {i} must be ({batch}, {}), got {:?}",
                            layer.out_dim(),
                            g.shape()
                        )));
                    }
                    a.mul(g)?
                }
                None => a.clone(),
            };
            pre.push(z);
            act.push(a);
            kept_gates.push(gate.cloned());
        }
        current.ensure_finite("network output")?;
        Ok((
            current,
            Tape {
                revision: self.revision,
                input: input.clone(),
                pre,
                act,
                gates: kept_gates,
            },
        ))
    }

    /// Backward pass from the gradient of a scalar loss w.r.t. the network
    /// output. Returns parameter gradients, the input gradient and gate
    /// gradients.
    pub fn backward(&self, tape: &Tape, output_grad: &Tensor) -> Result<MlpGrads> {
        self.check_tape(tape)?;
        let last = self.layers.len() - 1;
        let out = &tape.act[last];
        if output_grad.shape() != out.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} vs output {:?}",
                output_grad.shape(),
                out.shape()
            )));
        }
        let pre_grad = activation_backward(
            self.layers[last].activation,
            &tape.pre[last],
            out,
            output_grad,
        )?;
        self.backward_from(tape, last, pre_grad)
    }

    /// Backward pass starting from the gradient w.r.t. the *pre-activation*
    /// of the output layer, e.g. `probs - onehot` for softmax cross-entropy.
    pub fn backward_from_logits(&self, tape: &Tape, logit_grad: &Tensor) -> Result<MlpGrads> {
        self.check_tape(tape)?;
        let last = self.layers.len() - 1;
        if logit_grad.shape() != tape.pre[last].shape() {
            return Err(Error::Shape("logit gradient shape".into()));
        }
        self.backward_from(tape, last, logit_grad.clone())
    }

    fn backward_from(
        &self,
        tape: &Tape,
        last: usize,
        mut pre_grad: Tensor,
    ) -> Result<MlpGrads> {
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let mut gate_grads: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        let mut input_grad = Tensor::zeros(vec![0]);
        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            let layer_input = if i == 0 {
                tape.input.clone()
            } else {
                gated(&tape.act[i - 1], tape.gates[i - 1].as_ref())?
            };
            let dw = layer_input.t_matmul(&pre_grad)?;
            let db = Tensor::from_parts(vec![layer.out_dim()], pre_grad.column_sums());
            layer_grads.push(LayerGrad {
                weights: dw,
                bias: db,
            });
            let dx = pre_grad.matmul_t(&layer.weights)?;
            if i == 0 {
                input_grad = dx;
            } else {
                let prev = &self.layers[i - 1];
                let dact = match &tape.gates[i - 1] {
                    Some(g) => {
                        gate_grads[i - 1] = Some(dx.mul(&tape.act[i - 1])?);
                        dx.mul(g)?
                    }
                    None => dx,
                };
                pre_grad =
                    activation_backward(prev.activation, &tape.pre[i - 1], &tape.act[i - 1], &dact)?;
            }
        }
        layer_grads.reverse();
        Ok(MlpGrads {
            layers: layer_grads,
            input: input_grad,
            gates: gate_grads,
        })
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.revision != self.revision || tape.pre.len() != self.layers.len() {
            return Err(Error::Contract(
                "tape was recorded against different parameters".into(),
            ));
        }
        Ok(())
    }
}

impl Parameterized for Mlp {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.data()])
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.revision = fresh_revision();
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.data_mut()])
            .collect()
    }
}

fn validate_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("a network needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidArgument(format!("layer {i} has a zero dimension")));
        }
        if s.activation == Activation::Softmax && i + 1 != specs.len() {
            return Err(Error::InvalidArgument(
                "softmax is only allowed on the output layer".into(),
            ));
        }
    }
    for (i, w) in specs.windows(2).enumerate() {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::Shape(format!(
                "layer {i} outputs {} but layer {} expects {}",
                w[0].out_dim,
                i + 1,
                w[1].in_dim
            )));
        }
    }
    Ok(())
}

fn gated(act: &Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
    match gate {
        Some(g) => act.mul(g),
        None => Ok(act.clone()),
    }
}

pub(crate) fn softmax_rows(z: &Tensor) -> Tensor {
    let c = z.cols();
    let mut out = z.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_parts(z.shape().to_vec(), out)
}

fn activation_backward(
    activation: Activation,
    pre: &Tensor,
    act: &Tensor,
    grad: &Tensor,
) -> Result<Tensor> {
    match activation {
        Activation::Linear => Ok(grad.clone()),
        Activation::Softmax => {
            let c = act.cols();
            let mut out = Vec::with_capacity(act.len());
            for (s, g) in act.data().chunks_exact(c).zip(grad.data().chunks_exact(c)) {
                let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                out.extend(s.iter().zip(g).map(|(a, b)| a * (b - dot)));
            }
            Ok(Tensor::from_parts(act.shape().to_vec(), out))
        }
        _ => {
            let data = pre
                .data()
                .iter()
                .zip(act.data())
                .zip(grad.data())
                .map(|((&z, &a), &g)| g * activation.derivative(z, a))
                .collect();
            Ok(Tensor::from_parts(pre.shape().to_vec(), data))
        }
    }
}
