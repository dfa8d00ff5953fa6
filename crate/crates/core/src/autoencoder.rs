//! The end-to-end codec: a one-hot → codeword encoder with a power
//! constraint, a mirrored softmax decoder, and cross-entropy training through
//! any [`DifferentiableChannel`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::channels::ChannelModel;
use crate::numkit::{
    Activation, Checkpoint, LayerSpec, Mlp, MlpGrads, OptimizerConfig, OptimizerKind,
    OptimizerState, Parameterized, Tape, Tensor,
};
use crate::rng::SimRng;
use crate::{Error, Result};

/// Smallest probability fed to the logarithm in the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-300;

const DEGENERATE_NORM: f64 = 1e-12;

/// A channel the codec can be trained through: a stochastic forward map plus
/// the gradient of its output w.r.t. its input for a recorded draw.
///
/// Implementations take `&self`, so training the codec can never move the
/// channel's own parameters.
pub trait DifferentiableChannel {
    type Tape;

    /// `x` is `(batch, n)`; `messages[i]` is the label that produced row `i`.
    fn forward(
        &self,
        x: &Tensor,
        messages: &[usize],
        rng: &mut SimRng,
    ) -> Result<(Tensor, Self::Tape)>;

    /// Maps `∂loss/∂y` to `∂loss/∂x` for the draw recorded in `tape`; noise
    /// draws are constants.
    fn backward(&self, tape: &Self::Tape, output_grad: &Tensor) -> Result<Tensor>;

    /// Forward pass without keeping anything for a backward pass.
    fn sample(&self, x: &Tensor, messages: &[usize], rng: &mut SimRng) -> Result<Tensor> {
        Ok(self.forward(x, messages, rng)?.0)
    }
}

/// The true simulator used as its own differentiable channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelAwareChannel {
    pub model: ChannelModel,
    pub sigma: f64,
}

impl ModelAwareChannel {
    pub fn new(model: ChannelModel, sigma: f64) -> Self {
        Self { model, sigma }
    }
}

impl DifferentiableChannel for ModelAwareChannel {
    /// Per-entry gains: `∂y/∂x = diag(h)`.
    type Tape = Tensor;

    fn forward(&self, x: &Tensor, _messages: &[usize], rng: &mut SimRng) -> Result<(Tensor, Tensor)> {
        self.model.apply(x, self.sigma, rng)
    }

    fn backward(&self, gains: &Tensor, output_grad: &Tensor) -> Result<Tensor> {
        output_grad.mul(gains)
    }
}

/// How the raw encoder output is scaled to meet the power constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PowerNorm {
    /// `‖f(m)‖² = n` for every codeword.
    #[default]
    PerCodeword,
    /// Average `‖f(m)‖² = n` over the rows of the batch being encoded.
    BatchAverage,
}

impl fmt::Display for PowerNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PowerNorm::PerCodeword => "per_codeword",
            PowerNorm::BatchAverage => "batch_average",
        })
    }
}

impl FromStr for PowerNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_codeword" => Ok(PowerNorm::PerCodeword),
            "batch_average" => Ok(PowerNorm::BatchAverage),
            other => Err(Error::InvalidArgument(format!("unknown power norm `{other}`"))),
        }
    }
}

/// Encoder/decoder pair for `messages` labels over `block_len` real
/// dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecPair {
    encoder: Mlp,
    decoder: Mlp,
    messages: usize,
    block_len: usize,
    power_norm: PowerNorm,
}

/// Forward record of a batch encode.
#[derive(Debug, Clone)]
pub struct EncodeTape {
    mlp: Tape,
    raw: Tensor,
}

#[derive(Debug, Clone)]
pub struct CodecGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// The target probability was below [`PROB_FLOOR`] and was clamped.
    pub clamped: bool,
}

impl CodecPair {
    /// Encoder `M → hidden… → n` and decoder `n → hidden… → M`, ELU hidden
    /// layers, softmax decoder output.
    pub fn new<R: Rng + ?Sized>(
        messages: usize,
        block_len: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if messages < 2 || block_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "codec needs M >= 2 and n >= 1, got M={messages}, n={block_len}"
            )));
        }
        let enc_widths: Vec<usize> = std::iter::once(messages)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(block_len))
            .collect();
        let dec_widths: Vec<usize> = std::iter::once(block_len)
            .chain(hidden.iter().rev().copied())
            .chain(std::iter::once(messages))
            .collect();
        let encoder = Mlp::init(
            &LayerSpec::chain(&enc_widths, Activation::Elu, Activation::Linear),
            rng,
        )?;
        let decoder = Mlp::init(
            &LayerSpec::chain(&dec_widths, Activation::Elu, Activation::Softmax),
            rng,
        )?;
        Self::from_parts(encoder, decoder, PowerNorm::PerCodeword)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, power_norm: PowerNorm) -> Result<Self> {
        let messages = encoder.input_dim();
        let block_len = encoder.output_dim();
        if decoder.input_dim() != block_len || decoder.output_dim() != messages {
            return Err(Error::Shape(format!(
                "decoder maps {} -> {}, encoder maps {messages} -> {block_len}",
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        if decoder.layers().last().map(|l| l.activation()) != Some(Activation::Softmax) {
            return Err(Error::InvalidArgument("decoder must end in softmax".into()));
        }
        Ok(Self {
            encoder,
            decoder,
            messages,
            block_len,
            power_norm,
        })
    }

    pub fn messages(&self) -> usize {
        self.messages
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Mlp {
        &mut self.decoder
    }

    pub fn power_norm(&self) -> PowerNorm {
        self.power_norm
    }

    pub fn set_power_norm(&mut self, norm: PowerNorm) {
        self.power_norm = norm;
    }

    /// Bit rate per real dimension, `log2(M) / n`.
    pub fn rate(&self) -> f64 {
        (self.messages as f64).log2() / self.block_len as f64
    }

    pub fn one_hot(&self, messages: &[usize]) -> Result<Tensor> {
        let mut data = vec![0.0; messages.len() * self.messages];
        for (i, &m) in messages.iter().enumerate() {
            if m >= self.messages {
                return Err(Error::InvalidArgument(format!(
                    "message {m} out of range for M={}",
                    self.messages
                )));
            }
            data[i * self.messages + m] = 1.0;
        }
        Ok(Tensor::from_parts(vec![messages.len(), self.messages], data))
    }

    pub fn encode(&self, m: usize) -> Result<Tensor> {
        let (c, _) = self.encode_batch(&[m])?;
        c.reshape(vec![self.block_len])
    }

    /// Power-normalised codewords, one row per message.
    pub fn encode_batch(&self, messages: &[usize]) -> Result<(Tensor, EncodeTape)> {
        let input = self.one_hot(messages)?;
        let (raw, tape) = self.encoder.forward(&input)?;
        let codewords = self.normalize(&raw, messages)?;
        Ok((
            codewords,
            EncodeTape {
                mlp: tape,
                raw,
            },
        ))
    }

    /// The full `(M, n)` codebook.
    pub fn codebook(&self) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.messages).collect();
        Ok(self.encode_batch(&all)?.0)
    }

    fn normalize(&self, raw: &Tensor, messages: &[usize]) -> Result<Tensor> {
        let n = self.block_len as f64;
        let sq = raw.row_sq_norms();
        let mut out = raw.clone();
        match self.power_norm {
            PowerNorm::PerCodeword => {
                for (i, &s) in sq.iter().enumerate() {
                    let norm = s.sqrt();
                    if norm < DEGENERATE_NORM {
                        return Err(Error::DegenerateCodeword {
                            message: messages[i],
                            norm,
                        });
                    }
                    let k = n.sqrt() / norm;
                    out.row_mut(i).iter_mut().for_each(|v| *v *= k);
                }
            }
            PowerNorm::BatchAverage => {
                let scale = (sq.iter().sum::<f64>() / sq.len() as f64).sqrt();
                if scale < DEGENERATE_NORM {
                    return Err(Error::DegenerateCodeword {
                        message: messages.first().copied().unwrap_or(0),
                        norm: scale,
                    });
                }
                out = out.scale(n.sqrt() / scale);
            }
        }
        Ok(out)
    }

    /// Pulls `∂loss/∂codeword` back through the normalisation to the raw
    /// encoder output.
    fn normalize_backward(&self, raw: &Tensor, grad: &Tensor) -> Result<Tensor> {
        let n = self.block_len as f64;
        let mut out = grad.clone();
        match self.power_norm {
            PowerNorm::PerCodeword => {
                for i in 0..raw.rows() {
                    let v = raw.row(i);
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let g = grad.row(i);
                    let vg: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum();
                    let k = n.sqrt() / norm;
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = k * (g[j] - v[j] * vg / (norm * norm));
                    }
                }
            }
            PowerNorm::BatchAverage => {
                let rows = raw.rows() as f64;
                let s = (raw.row_sq_norms().iter().sum::<f64>() / rows).sqrt();
                let vg: f64 = raw.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum();
                let k = n.sqrt() / s;
                for ((o, &g), &v) in out.data_mut().iter_mut().zip(grad.data()).zip(raw.data()) {
                    *o = k * g - k * vg * v / (rows * s * s);
                }
            }
        }
        Ok(out)
    }

    /// Backward pass of [`CodecPair::encode_batch`].
    pub fn encode_backward(&self, tape: &EncodeTape, codeword_grad: &Tensor) -> Result<MlpGrads> {
        if codeword_grad.shape() != tape.raw.shape() {
            return Err(Error::Shape("codeword gradient shape".into()));
        }
        let raw_grad = self.normalize_backward(&tape.raw, codeword_grad)?;
        self.encoder.backward(&tape.mlp, &raw_grad)
    }

    /// Message probabilities for a single received vector.
    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        let y = y.clone().reshape(vec![1, self.block_len])?;
        let (p, _) = self.decoder.forward(&y)?;
        p.reshape(vec![self.messages])
    }

    pub fn decode_batch(&self, y: &Tensor) -> Result<Tensor> {
        Ok(self.decoder.forward(y)?.0)
    }

    /// Argmax decisions, ties to the lowest index.
    pub fn detect_batch(&self, y: &Tensor) -> Result<Vec<usize>> {
        let probs = self.decode_batch(y)?;
        Ok((0..probs.rows()).map(|i| hard_decision(probs.row(i))).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("codec")
            .with_meta("messages", self.messages)
            .with_meta("block_len", self.block_len)
            .with_meta("power_norm", self.power_norm)
            .with_net("encoder", &self.encoder)
            .with_net("decoder", &self.decoder)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("codec")?;
        let codec = Self::from_parts(
            ck.net("encoder")?,
            ck.net("decoder")?,
            ck.meta_parse("power_norm")?,
        )?;
        if codec.messages != ck.meta_parse::<usize>("messages")?
            || codec.block_len != ck.meta_parse::<usize>("block_len")?
        {
            return Err(Error::Checkpoint("codec header disagrees with networks".into()));
        }
        Ok(codec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Parameterized for CodecPair {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.param_slices();
        v.extend(self.decoder.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.param_slices_mut();
        v.extend(self.decoder.param_slices_mut());
        v
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn hard_decision(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// `−ln probs[m]`, with the probability clamped at [`PROB_FLOOR`].
pub fn cross_entropy_loss(probs: &[f64], m: usize) -> Result<CrossEntropy> {
    let p = *probs.get(m).ok_or_else(|| {
        Error::InvalidArgument(format!("message {m} outside {} classes", probs.len()))
    })?;
    if !(0.0..=1.0 + 1e-9).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p} out of range")));
    }
    let clamped = p < PROB_FLOOR;
    Ok(CrossEntropy {
        loss: -p.max(PROB_FLOOR).ln(),
        clamped,
    })
}

/// Mean cross-entropy over a batch of probability rows.
pub fn batch_cross_entropy(probs: &Tensor, messages: &[usize]) -> Result<CrossEntropy> {
    if probs.rows() != messages.len() || messages.is_empty() {
        return Err(Error::Shape("one probability row per message required".into()));
    }
    let mut total = 0.0;
    let mut clamped = false;
    for (i, &m) in messages.iter().enumerate() {
        let ce = cross_entropy_loss(probs.row(i), m)?;
        total += ce.loss;
        clamped |= ce.clamped;
    }
    Ok(CrossEntropy {
        loss: total / messages.len() as f64,
        clamped,
    })
}

/// Optimizer pair for a codec; the encoder and decoder are stepped together.
#[derive(Debug, Clone)]
pub struct CodecOptimizers {
    pub encoder: OptimizerState,
    pub decoder: OptimizerState,
}

impl CodecOptimizers {
    pub fn new(config: OptimizerConfig, codec: &CodecPair) -> Result<Self> {
        Ok(Self {
            encoder: OptimizerState::for_params(config, &codec.encoder)?,
            decoder: OptimizerState::for_params(config, &codec.decoder)?,
        })
    }

    /// NAdam at `1e-3`.
    pub fn default_for(codec: &CodecPair) -> Result<Self> {
        Self::new(OptimizerConfig::new(OptimizerKind::NAdam, 1e-3), codec)
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        self.encoder.set_learning_rate(lr)?;
        self.decoder.set_learning_rate(lr)
    }
}

/// Mean cross-entropy of `messages` sent through `channel`, with gradients
/// for both networks. The channel input gradient is pulled back into the
/// encoder.
pub fn ae_loss_and_grads<C: DifferentiableChannel>(
    codec: &CodecPair,
    channel: &C,
    messages: &[usize],
    rng: &mut SimRng,
) -> Result<(f64, CodecGrads)> {
    if messages.is_empty() {
        return Err(Error::InvalidArgument("empty message batch".into()));
    }
    let (x, enc_tape) = codec.encode_batch(messages)?;
    let (y, ch_tape) = channel.forward(&x, messages, rng)?;
    let (probs, dec_tape) = codec.decoder.forward(&y)?;
    let ce = batch_cross_entropy(&probs, messages)?;
    if !ce.loss.is_finite() {
        return Err(Error::NonFinite("autoencoder loss".into()));
    }
    let batch = messages.len() as f64;
    let mut logit_grad = probs.scale(1.0 / batch);
    for (i, &m) in messages.iter().enumerate() {
        logit_grad.row_mut(i)[m] -= 1.0 / batch;
    }
    let decoder = codec.decoder.backward_from_logits(&dec_tape, &logit_grad)?;
    let x_grad = channel.backward(&ch_tape, &decoder.input)?;
    let encoder = codec.encode_backward(&enc_tape, &x_grad)?;
    Ok((ce.loss, CodecGrads { encoder, decoder }))
}

/// One joint optimizer step on encoder and decoder; returns the batch loss.
pub fn ae_train_step<C: DifferentiableChannel>(
    codec: &mut CodecPair,
    channel: &C,
    messages: &[usize],
    opts: &mut CodecOptimizers,
    rng: &mut SimRng,
) -> Result<f64> {
    let (loss, grads) = ae_loss_and_grads(codec, channel, messages, rng)?;
    opts.encoder
        .apply(&mut codec.encoder, &grads.encoder.param_slices())?;
    opts.decoder
        .apply(&mut codec.decoder, &grads.decoder.param_slices())?;
    Ok(loss)
}
