//! Conditional Wasserstein GAN channel generator, the baseline surrogate.
//!
//! Both networks see the channel input: the generator maps `[z | f(m)]` to
//! `y`, the critic scores `[y | f(m)]`. Lipschitz control is by weight
//! clipping after every critic update.

use std::path::Path;

use rand::Rng;

use crate::autoencoder::DifferentiableChannel;
use crate::diffusion::standard_normal;
use crate::numkit::{
    Activation, Checkpoint, LayerSpec, Mlp, OptimizerConfig, OptimizerKind, OptimizerState,
    Parameterized, Tape, Tensor,
};
use crate::rng::SimRng;
use crate::{Error, Result};

pub const DEFAULT_CLIP: f64 = 0.01;
pub const DEFAULT_N_CRITIC: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct WganPair {
    pub generator: Mlp,
    pub critic: Mlp,
    pub clip_c: f64,
    pub n_critic: usize,
}

/// Generator tape; only the `f(m)` half of the input gradient is returned.
#[derive(Debug, Clone)]
pub struct GeneratorTape {
    mlp: Tape,
}

#[derive(Debug, Clone)]
pub struct WganOptimizers {
    pub generator: OptimizerState,
    pub critic: OptimizerState,
}

impl WganOptimizers {
    /// RMSprop for both networks at `lr`.
    pub fn rmsprop(pair: &WganPair, lr: f64) -> Result<Self> {
        let config = OptimizerConfig::new(OptimizerKind::RmsProp, lr);
        Ok(Self {
            generator: OptimizerState::for_params(config, &pair.generator)?,
            critic: OptimizerState::for_params(config, &pair.critic)?,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        self.generator.set_learning_rate(lr)?;
        self.critic.set_learning_rate(lr)
    }
}

impl WganPair {
    /// Two ReLU hidden layers of `hidden` units in each network; the noise
    /// input has the same width `n` as the codeword.
    pub fn new<R: Rng + ?Sized>(block_len: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if block_len == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("wgan dimensions must be positive".into()));
        }
        let gen = LayerSpec::chain(
            &[2 * block_len, hidden, hidden, block_len],
            Activation::Relu,
            Activation::Linear,
        );
        let critic = LayerSpec::chain(
            &[2 * block_len, hidden, hidden, 1],
            Activation::Relu,
            Activation::Linear,
        );
        let generator = Mlp::init(&gen, rng)?;
        let mut critic = Mlp::init(&critic, rng)?;
        critic.clip_params(DEFAULT_CLIP);
        Self::from_parts(generator, critic, DEFAULT_CLIP, DEFAULT_N_CRITIC)
    }

    pub fn from_parts(generator: Mlp, critic: Mlp, clip_c: f64, n_critic: usize) -> Result<Self> {
        let n = generator.output_dim();
        if generator.input_dim() != 2 * n || critic.input_dim() != 2 * n || critic.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "generator must map 2n -> n and critic 2n -> 1 (n = {n})"
            )));
        }
        if !(clip_c > 0.0 && clip_c.is_finite()) {
            return Err(Error::InvalidArgument(format!("clip_c must be positive, got {clip_c}")));
        }
        if n_critic == 0 {
            return Err(Error::InvalidArgument("n_critic must be at least 1".into()));
        }
        Ok(Self {
            generator,
            critic,
            clip_c,
            n_critic,
        })
    }

    pub fn block_len(&self) -> usize {
        self.generator.output_dim()
    }

    fn check_fm(&self, fm: &Tensor) -> Result<()> {
        if fm.shape().len() != 2 || fm.cols() != self.block_len() {
            return Err(Error::Shape(format!(
                "channel inputs must be (batch, {}), got {:?}",
                self.block_len(),
                fm.shape()
            )));
        }
        Ok(())
    }

    /// `G(z, f(m))` for fresh standard-normal `z`, one row per input row.
    pub fn generate_batch(&self, fm: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, GeneratorTape)> {
        self.check_fm(fm)?;
        let z = standard_normal(fm.shape(), rng);
        let (y, mlp) = self.generator.forward(&z.hcat(fm)?)?;
        Ok((y, GeneratorTape { mlp }))
    }

    /// Gradient of the loss w.r.t. `f(m)` given its gradient w.r.t. `y`.
    pub fn generator_input_grad(&self, tape: &GeneratorTape, y_grad: &Tensor) -> Result<Tensor> {
        let grads = self.generator.backward(&tape.mlp, y_grad)?;
        Ok(grads.input.hsplit(self.block_len())?.1)
    }

    /// Mean critic score over rows of `[y | f(m)]`, with its tape.
    fn critic_mean(&self, y: &Tensor, fm: &Tensor) -> Result<(f64, Tape)> {
        let (s, tape) = self.critic.forward(&y.hcat(fm)?)?;
        Ok((s.mean(), tape))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("wgan")
            .with_meta("clip_c", format!("{:e}", self.clip_c))
            .with_meta("n_critic", self.n_critic)
            .with_net("generator", &self.generator)
            .with_net("critic", &self.critic)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("wgan")?;
        Self::from_parts(
            ck.net("generator")?,
            ck.net("critic")?,
            ck.meta_parse("clip_c")?,
            ck.meta_parse("n_critic")?,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One generated output for a single codeword.
pub fn wgan_generate(pair: &WganPair, fm: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let n = pair.block_len();
    let (y, _) = pair.generate_batch(&fm.clone().reshape(vec![1, n])?, rng)?;
    y.reshape(vec![n])
}

/// One RMSprop step raising `mean C(real) − mean C(fake)`, then clipping.
/// Returns the minimized loss `mean C(fake) − mean C(real)`.
pub fn critic_step(
    pair: &mut WganPair,
    real: &Tensor,
    fake: &Tensor,
    fm: &Tensor,
    opt: &mut OptimizerState,
) -> Result<f64> {
    pair.check_fm(fm)?;
    if real.shape() != fm.shape() || fake.shape() != fm.shape() {
        return Err(Error::Shape("real, fake and condition batches must align".into()));
    }
    let rows = fm.rows();
    if rows == 0 {
        return Err(Error::InvalidArgument("empty critic batch".into()));
    }
    let (real_score, real_tape) = pair.critic_mean(real, fm)?;
    let (fake_score, fake_tape) = pair.critic_mean(fake, fm)?;
    let loss = fake_score - real_score;
    if !loss.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    let w = 1.0 / rows as f64;
    let g_real = pair.critic.backward(&real_tape, &Tensor::filled(vec![rows, 1], -w))?;
    let g_fake = pair.critic.backward(&fake_tape, &Tensor::filled(vec![rows, 1], w))?;
    let total: Vec<Vec<f64>> = g_real
        .param_slices()
        .iter()
        .zip(g_fake.param_slices())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    let slices: Vec<&[f64]> = total.iter().map(Vec::as_slice).collect();
    opt.apply(&mut pair.critic, &slices)?;
    pair.critic.clip_params(pair.clip_c);
    Ok(loss)
}

/// One RMSprop step on the generator lowering `−mean C(G(z, f(m)), f(m))`
/// with the critic held fixed; returns that loss.
pub fn generator_step(
    pair: &mut WganPair,
    fm: &Tensor,
    opt: &mut OptimizerState,
    rng: &mut impl Rng,
) -> Result<f64> {
    let rows = fm.rows();
    if rows == 0 {
        return Err(Error::InvalidArgument("empty generator batch".into()));
    }
    let (y, gtape) = pair.generate_batch(fm, rng)?;
    let (score, ctape) = pair.critic_mean(&y, fm)?;
    let loss = -score;
    if !loss.is_finite() {
        return Err(Error::NonFinite("generator loss".into()));
    }
    let c_grads = pair
        .critic
        .backward(&ctape, &Tensor::filled(vec![rows, 1], -1.0 / rows as f64))?;
    let (y_grad, _) = c_grads.input.hsplit(pair.block_len())?;
    let g_grads = pair.generator.backward(&gtape.mlp, &y_grad)?;
    opt.apply(&mut pair.generator, &g_grads.param_slices())?;
    Ok(loss)
}

/// A trained generator used as the AE's channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WganChannel {
    pub pair: WganPair,
}

impl DifferentiableChannel for WganChannel {
    type Tape = GeneratorTape;

    fn forward(&self, x: &Tensor, _messages: &[usize], rng: &mut SimRng) -> Result<(Tensor, GeneratorTape)> {
        self.pair.generate_batch(x, rng)
    }

    fn backward(&self, tape: &GeneratorTape, output_grad: &Tensor) -> Result<Tensor> {
        self.pair.generator_input_grad(tape, output_grad)
    }
}

impl Parameterized for WganChannel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.pair.generator.param_slices();
        v.extend(self.pair.critic.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.pair.generator.param_slices_mut();
        v.extend(self.pair.critic.param_slices_mut());
        v
    }
}
