//! The conditional noise predictor `ẑ(x_t, t | m, f(m))`.
//!
//! Input is `[x_t | f(m)]` (width `2n`). Every hidden activation is multiplied
//! by the gate `e_t ∘ e_m`, where `e_t` and `e_m` are learnable rows of the
//! step and message embedding tables.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numkit::{Activation, LayerSpec, Mlp, MlpGrads, Parameterized, Tape, Tensor};
use crate::{Error, Result};

/// Standard deviation of the perturbation around 1 in the initial gates.
const GATE_INIT_STD: f64 = 0.1;

/// A message label together with its codeword `f(m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub m: usize,
    pub fm: Tensor,
}

impl Condition {
    pub fn new(m: usize, fm: Tensor) -> Self {
        Self { m, fm }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDenoiser {
    net: Mlp,
    t_embed: Tensor,
    m_embed: Tensor,
    block_len: usize,
}

#[derive(Debug, Clone)]
pub struct DenoiserTape {
    mlp: Tape,
    steps: Vec<usize>,
    messages: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    pub net: MlpGrads,
    pub t_embed: Tensor,
    pub m_embed: Tensor,
    pub x_t: Tensor,
    pub fm: Tensor,
}

impl DenoiserGrads {
    /// Parameter gradients in [`Parameterized`] order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.net.param_slices();
        v.push(self.t_embed.data());
        v.push(self.m_embed.data());
        v
    }
}

impl ConditionalDenoiser {
    /// `hidden_layers` Softplus layers of `hidden` units and a linear output
    /// of width `block_len`. Gates start at `1 + N(0, 0.1²)`.
    pub fn new<R: Rng + ?Sized>(
        block_len: usize,
        messages: usize,
        steps: usize,
        hidden: usize,
        hidden_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if block_len == 0 || messages == 0 || steps == 0 || hidden == 0 || hidden_layers == 0 {
            return Err(Error::InvalidArgument("denoiser dimensions must be positive".into()));
        }
        let widths: Vec<usize> = std::iter::once(2 * block_len)
            .chain(std::iter::repeat_n(hidden, hidden_layers))
            .chain(std::iter::once(block_len))
            .collect();
        let net = Mlp::init(
            &LayerSpec::chain(&widths, Activation::Softplus, Activation::Linear),
            rng,
        )?;
        let perturb = Normal::new(1.0, GATE_INIT_STD).expect("valid normal");
        let mut table = |rows: usize| {
            let data = (0..rows * hidden).map(|_| perturb.sample(&mut *rng)).collect();
            Tensor::from_parts(vec![rows, hidden], data)
        };
        let t_embed = table(steps);
        let m_embed = table(messages);
        Ok(Self {
            net,
            t_embed,
            m_embed,
            block_len,
        })
    }

    pub fn from_parts(net: Mlp, t_embed: Tensor, m_embed: Tensor) -> Result<Self> {
        let block_len = net.output_dim();
        if net.input_dim() != 2 * block_len {
            return Err(Error::Shape(format!(
                "denoiser input width {} must be twice the output width {block_len}",
                net.input_dim()
            )));
        }
        let hidden_layers = net.layers().len() - 1;
        if hidden_layers == 0 {
            return Err(Error::Shape("denoiser needs a hidden layer".into()));
        }
        let widths: Vec<usize> = net.layers()[..hidden_layers]
            .iter()
            .map(|l| l.out_dim())
            .collect();
        let hidden = widths[0];
        if widths.iter().any(|&w| w != hidden) {
            return Err(Error::Shape("all hidden layers must share the gate width".into()));
        }
        if t_embed.cols() != hidden || m_embed.cols() != hidden {
            return Err(Error::Shape("embedding width must equal hidden width".into()));
        }
        Ok(Self {
            net,
            t_embed,
            m_embed,
            block_len,
        })
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn steps(&self) -> usize {
        self.t_embed.rows()
    }

    pub fn messages(&self) -> usize {
        self.m_embed.rows()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn t_embed(&self) -> &Tensor {
        &self.t_embed
    }

    pub fn m_embed(&self) -> &Tensor {
        &self.m_embed
    }

    fn hidden_layers(&self) -> usize {
        self.net.layers().len() - 1
    }

    fn gates(&self, steps: &[usize], messages: &[usize]) -> Result<Tensor> {
        let h = self.t_embed.cols();
        let mut data = Vec::with_capacity(steps.len() * h);
        for (&t, &m) in steps.iter().zip(messages) {
            if t == 0 || t > self.steps() {
                return Err(Error::InvalidArgument(format!(
                    "step {t} outside 1..={}",
                    self.steps()
                )));
            }
            if m >= self.messages() {
                return Err(Error::InvalidArgument(format!(
                    "message {m} outside 0..{}",
                    self.messages()
                )));
            }
            data.extend(
                self.t_embed
                    .row(t - 1)
                    .iter()
                    .zip(self.m_embed.row(m))
                    .map(|(a, b)| a * b),
            );
        }
        Ok(Tensor::from_parts(vec![steps.len(), h], data))
    }

    /// Batched prediction. Rows of `x_t` and `fm` pair with `steps[i]` and
    /// `messages[i]`.
    pub fn forward(
        &self,
        x_t: &Tensor,
        steps: &[usize],
        messages: &[usize],
        fm: &Tensor,
    ) -> Result<(Tensor, DenoiserTape)> {
        let batch = x_t.rows();
        if steps.len() != batch || messages.len() != batch || fm.rows() != batch {
            return Err(Error::Shape(format!(
                "batch of {batch} rows needs matching steps, messages and conditions"
            )));
        }
        if x_t.cols() != self.block_len || fm.cols() != self.block_len {
            return Err(Error::Shape(format!(
                "x_t and f(m) must have width {}",
                self.block_len
            )));
        }
        let input = x_t.hcat(fm)?;
        let gate = self.gates(steps, messages)?;
        let gates: Vec<Option<&Tensor>> = vec![Some(&gate); self.hidden_layers()];
        let (zhat, mlp) = self.net.forward_gated(&input, &gates)?;
        Ok((
            zhat,
            DenoiserTape {
                mlp,
                steps: steps.to_vec(),
                messages: messages.to_vec(),
            },
        ))
    }

    /// Single-sample prediction for `cond` at step `t`.
    pub fn predict(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<Tensor> {
        let x = x_t.clone().reshape(vec![1, self.block_len])?;
        let fm = cond.fm.clone().reshape(vec![1, self.block_len])?;
        let (z, _) = self.forward(&x, &[t], &[cond.m], &fm)?;
        z.reshape(vec![self.block_len])
    }

    pub fn backward(&self, tape: &DenoiserTape, zhat_grad: &Tensor) -> Result<DenoiserGrads> {
        let net = self.net.backward(&tape.mlp, zhat_grad)?;
        let h = self.t_embed.cols();
        let mut gate_total = Tensor::zeros(vec![zhat_grad.rows(), h]);
        for g in net.gates.iter().flatten() {
            gate_total.axpy(1.0, g)?;
        }
        let mut t_embed = Tensor::zeros(self.t_embed.shape().to_vec());
        let mut m_embed = Tensor::zeros(self.m_embed.shape().to_vec());
        for (i, (&t, &m)) in tape.steps.iter().zip(&tape.messages).enumerate() {
            let dg = gate_total.row(i);
            let et = self.t_embed.row(t - 1);
            let em = self.m_embed.row(m);
            for (j, o) in t_embed.row_mut(t - 1).iter_mut().enumerate() {
                *o += dg[j] * em[j];
            }
            for (j, o) in m_embed.row_mut(m).iter_mut().enumerate() {
                *o += dg[j] * et[j];
            }
        }
        let (x_t, fm) = net.input.hsplit(self.block_len)?;
        Ok(DenoiserGrads {
            net,
            t_embed,
            m_embed,
            x_t,
            fm,
        })
    }
}

impl Parameterized for ConditionalDenoiser {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.net.param_slices();
        v.push(self.t_embed.data());
        v.push(self.m_embed.data());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.net.param_slices_mut();
        v.push(self.t_embed.data_mut());
        v.push(self.m_embed.data_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng_stream;

    fn den() -> ConditionalDenoiser {
        ConditionalDenoiser::new(7, 16, 50, 64, 3, &mut make_rng_stream(1, "den")).unwrap()
    }

    #[test]
    fn output_width_is_block_len() {
        let d = den();
        let cond = Condition::new(3, Tensor::new(vec![7], vec![1.0; 7]).unwrap());
        let z = d.predict(&Tensor::zeros(vec![7]), 10, &cond).unwrap();
        assert_eq!(z.shape(), &[7]);
    }

    #[test]
    fn message_changes_prediction() {
        let d = den();
        let fm = Tensor::new(vec![7], vec![1.0; 7]).unwrap();
        let x = Tensor::new(vec![7], vec![0.3; 7]).unwrap();
        let a = d.predict(&x, 5, &Condition::new(0, fm.clone())).unwrap();
        let b = d.predict(&x, 5, &Condition::new(1, fm)).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() > 1e-6);
    }

    #[test]
    fn out_of_range_conditions_are_rejected() {
        let d = den();
        let fm = Tensor::new(vec![7], vec![1.0; 7]).unwrap();
        let x = Tensor::zeros(vec![7]);
        assert!(d.predict(&x, 0, &Condition::new(0, fm.clone())).is_err());
        assert!(d.predict(&x, 51, &Condition::new(0, fm.clone())).is_err());
        assert!(d.predict(&x, 1, &Condition::new(16, fm)).is_err());
        let short = Condition::new(0, Tensor::zeros(vec![6]));
        assert!(d.predict(&x, 1, &short).is_err());
    }

    #[test]
    fn gates_start_near_one() {
        let d = den();
        let mean = d.t_embed().mean();
        assert!((mean - 1.0).abs() < 0.02);
    }
}
