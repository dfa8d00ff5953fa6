//! Conditional denoising diffusion as a differentiable channel surrogate.
//!
//! The surrogate is trained to predict the noise mixed into channel outputs
//! `y` conditioned on `(m, f(m))`, then generates `y` by running the reverse
//! chain from `x_T ~ N(0, I)`. Every reverse step is affine in `x_t` and the
//! predicted noise, so the generated output is differentiable w.r.t. `f(m)`.

mod denoiser;
mod schedule;

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

pub use denoiser::{Condition, ConditionalDenoiser, DenoiserGrads, DenoiserTape};
pub use schedule::{
    build_schedule, denoise_step, denoise_step_with, diffuse_closed, diffuse_step,
    mean_from_noise, posterior_moments, NoiseSchedule, ReverseNoise,
};
pub(crate) use schedule::standard_normal;

use crate::autoencoder::DifferentiableChannel;
use crate::numkit::{Checkpoint, OptimizerState, Parameterized, Tensor};
use crate::rng::SimRng;
use crate::{Error, Result};

/// A batch of training pairs: channel outputs `x0` for conditions
/// `(messages[i], fm.row(i))`.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionBatch<'a> {
    pub messages: &'a [usize],
    pub fm: &'a Tensor,
    pub x0: &'a Tensor,
}

/// Noise-prediction loss `mean ‖ẑ(x_t, t | c) − z_0‖²` with `t ~ U{1..T}`
/// drawn per row, and its gradients.
pub fn diffusion_loss<R: Rng + ?Sized>(
    den: &ConditionalDenoiser,
    batch: DiffusionBatch<'_>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, DenoiserGrads)> {
    let rows = batch.x0.rows();
    if rows == 0 {
        return Err(Error::InvalidArgument("empty diffusion batch".into()));
    }
    if sched.steps() != den.steps() {
        return Err(Error::Shape(format!(
            "schedule has {} steps, denoiser embeds {}",
            sched.steps(),
            den.steps()
        )));
    }
    let steps: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=sched.steps())).collect();
    let z0 = standard_normal(batch.x0.shape(), rng);
    let mut x_t = batch.x0.clone();
    for (i, &t) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (x, z) in x_t.row_mut(i).iter_mut().zip(z0.row(i)) {
            *x = s * *x + n * z;
        }
    }
    let (zhat, tape) = den.forward(&x_t, &steps, batch.messages, batch.fm)?;
    let diff = zhat.sub(&z0)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / rows as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("diffusion loss".into()));
    }
    let grads = den.backward(&tape, &diff.scale(2.0 / rows as f64))?;
    Ok((loss, grads))
}

/// One optimizer step on the denoiser; returns the batch loss.
pub fn diffusion_train_step<R: Rng + ?Sized>(
    den: &mut ConditionalDenoiser,
    opt: &mut OptimizerState,
    batch: DiffusionBatch<'_>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let (loss, grads) = diffusion_loss(den, batch, sched, rng)?;
    opt.apply(den, &grads.param_slices())?;
    Ok(loss)
}

/// A trained denoiser, its schedule and the reverse-noise convention: the
/// generated channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DdpmChannel {
    pub denoiser: ConditionalDenoiser,
    pub schedule: NoiseSchedule,
    pub reverse_noise: ReverseNoise,
}

/// States `x_T, …, x_1` visited by a forward pass, kept so the backward pass
/// can recompute each step's denoiser tape.
#[derive(Debug, Clone)]
pub struct ChainTape {
    /// `states[t - 1]` is `x_t`.
    states: Vec<Tensor>,
    messages: Vec<usize>,
    fm: Tensor,
}

impl DdpmChannel {
    pub fn new(
        denoiser: ConditionalDenoiser,
        schedule: NoiseSchedule,
        reverse_noise: ReverseNoise,
    ) -> Result<Self> {
        if denoiser.steps() != schedule.steps() {
            return Err(Error::Shape(format!(
                "schedule has {} steps, denoiser embeds {}",
                schedule.steps(),
                denoiser.steps()
            )));
        }
        Ok(Self {
            denoiser,
            schedule,
            reverse_noise,
        })
    }

    fn check_inputs(&self, fm: &Tensor, messages: &[usize]) -> Result<()> {
        if fm.rows() != messages.len() || fm.cols() != self.denoiser.block_len() {
            return Err(Error::Shape(format!(
                "expected ({}, {}) channel inputs, got {:?}",
                messages.len(),
                self.denoiser.block_len(),
                fm.shape()
            )));
        }
        Ok(())
    }

    /// Runs the reverse chain, calling `visit(t, x_t)` before each step
    /// and `visit(0, x_0)` at the end.
    fn run_chain(
        &self,
        fm: &Tensor,
        messages: &[usize],
        rng: &mut SimRng,
        mut visit: impl FnMut(usize, &Tensor),
    ) -> Result<Tensor> {
        self.check_inputs(fm, messages)?;
        let big_t = self.schedule.steps();
        let mut x = standard_normal(fm.shape(), rng);
        let mut steps = vec![0; messages.len()];
        for t in (1..=big_t).rev() {
            visit(t, &x);
            steps.fill(t);
            let (zhat, _) = self
                .denoiser
                .forward(&x, &steps, messages, fm)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Generation { step: t },
                    other => other,
                })?;
            let fresh = (t > 1).then(|| standard_normal(fm.shape(), rng));
            x = denoise_step_with(&x, t, &zhat, &self.schedule, self.reverse_noise, fresh.as_ref())?;
            if !x.is_finite() {
                return Err(Error::Generation { step: t });
            }
        }
        visit(0, &x);
        Ok(x)
    }

    /// One generated channel output for `cond`.
    pub fn generate(&self, cond: &Condition, rng: &mut SimRng) -> Result<Tensor> {
        let n = self.denoiser.block_len();
        let fm = cond.fm.clone().reshape(vec![1, n])?;
        self.run_chain(&fm, &[cond.m], rng, |_, _| {})?
            .reshape(vec![n])
    }

    /// Generated outputs together with the chain states at every step
    /// (`T, T−1, …, 0`).
    pub fn trajectory(
        &self,
        fm: &Tensor,
        messages: &[usize],
        rng: &mut SimRng,
    ) -> Result<Vec<(usize, Tensor)>> {
        let mut states = Vec::with_capacity(self.schedule.steps() + 1);
        self.run_chain(fm, messages, rng, |t, x| states.push((t, x.clone())))?;
        Ok(states)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let d = &self.denoiser;
        let betas = Tensor::from_parts(vec![1, self.schedule.steps()], self.schedule.betas().to_vec());
        Checkpoint::new("ddpm")
            .with_meta("block_len", d.block_len())
            .with_meta("messages", d.messages())
            .with_meta("steps", d.steps())
            .with_meta("reverse_noise", self.reverse_noise)
            .with_array("beta", &betas)
            .with_array("t_embed", d.t_embed())
            .with_array("m_embed", d.m_embed())
            .with_net("net", d.net())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("ddpm")?;
        let schedule = NoiseSchedule::new(ck.array("beta")?.into_data())?;
        let denoiser =
            ConditionalDenoiser::from_parts(ck.net("net")?, ck.array("t_embed")?, ck.array("m_embed")?)?;
        if denoiser.steps() != ck.meta_parse::<usize>("steps")?
            || denoiser.messages() != ck.meta_parse::<usize>("messages")?
            || denoiser.block_len() != ck.meta_parse::<usize>("block_len")?
        {
            return Err(Error::Checkpoint("ddpm header disagrees with tables".into()));
        }
        Self::new(denoiser, schedule, ck.meta_parse("reverse_noise")?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl DifferentiableChannel for DdpmChannel {
    type Tape = ChainTape;

    fn forward(&self, x: &Tensor, messages: &[usize], rng: &mut SimRng) -> Result<(Tensor, ChainTape)> {
        let mut states = vec![Tensor::zeros(vec![0]); self.schedule.steps()];
        let y = self.run_chain(x, messages, rng, |t, s| {
            if t > 0 {
                states[t - 1] = s.clone();
            }
        })?;
        Ok((
            y,
            ChainTape {
                states,
                messages: messages.to_vec(),
                fm: x.clone(),
            },
        ))
    }

    /// Reverse-mode pass through the whole chain. With `g = ∂L/∂x_{t−1}`,
    /// step `t` contributes `∂L/∂x_t = a·g − b·J_xᵀg` and
    /// `∂L/∂f += −b·J_fᵀg`, where `J` is the denoiser Jacobian at `x_t`.
    fn backward(&self, tape: &ChainTape, output_grad: &Tensor) -> Result<Tensor> {
        if output_grad.shape() != tape.fm.shape() {
            return Err(Error::Shape("generated-output gradient shape".into()));
        }
        let mut g = output_grad.clone();
        let mut fm_grad = Tensor::zeros(tape.fm.shape().to_vec());
        let mut steps = vec![0; tape.messages.len()];
        for t in 1..=self.schedule.steps() {
            let x_t = &tape.states[t - 1];
            steps.fill(t);
            let (_, dtape) = self.denoiser.forward(x_t, &steps, &tape.messages, &tape.fm)?;
            let (a, b) = self.schedule.reverse_mean_coefficients(t);
            let grads = self.denoiser.backward(&dtape, &g.scale(-b))?;
            fm_grad.axpy(1.0, &grads.fm)?;
            g = g.scale(a);
            g.axpy(1.0, &grads.x_t)?;
        }
        Ok(fm_grad)
    }

    fn sample(&self, x: &Tensor, messages: &[usize], rng: &mut SimRng) -> Result<Tensor> {
        self.run_chain(x, messages, rng, |_, _| {})
    }
}

impl Parameterized for DdpmChannel {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.denoiser.param_slices()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.denoiser.param_slices_mut()
    }
}

/// CSV text `step,dim0,…,dim{n−1}` with one row per sample per step.
pub fn trajectory_csv(states: &[(usize, Tensor)]) -> String {
    let n = states.first().map_or(0, |(_, x)| x.cols());
    let mut out = String::from("step");
    for d in 0..n {
        write!(out, ",dim{d}").unwrap();
    }
    out.push('\n');
    for (t, x) in states {
        for i in 0..x.rows() {
            write!(out, "{t}").unwrap();
            for v in x.row(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng_stream;

    fn channel(steps: usize) -> DdpmChannel {
        let den =
            ConditionalDenoiser::new(2, 4, steps, 8, 2, &mut make_rng_stream(3, "den")).unwrap();
        DdpmChannel::new(den, NoiseSchedule::constant(steps, 0.05).unwrap(), ReverseNoise::SqrtBeta)
            .unwrap()
    }

    #[test]
    fn generation_is_seeded() {
        let ch = channel(10);
        let cond = Condition::new(1, Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let a = ch.generate(&cond, &mut make_rng_stream(1, "g")).unwrap();
        let b = ch.generate(&cond, &mut make_rng_stream(1, "g")).unwrap();
        assert_eq!(a, b);
        let c = ch.generate(&cond, &mut make_rng_stream(2, "g")).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forward_and_sample_agree() {
        let ch = channel(6);
        let fm = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]).unwrap();
        let ms = [0, 1, 3];
        let (y, _) = ch.forward(&fm, &ms, &mut make_rng_stream(4, "s")).unwrap();
        let y2 = ch.sample(&fm, &ms, &mut make_rng_stream(4, "s")).unwrap();
        assert_eq!(y, y2);
    }

    #[test]
    fn trajectory_has_every_step() {
        let ch = channel(5);
        let fm = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let states = ch.trajectory(&fm, &[0, 1], &mut make_rng_stream(0, "t")).unwrap();
        let steps: Vec<usize> = states.iter().map(|(t, _)| *t).collect();
        assert_eq!(steps, vec![5, 4, 3, 2, 1, 0]);
        let csv = trajectory_csv(&states);
        assert!(csv.starts_with("step,dim0,dim1\n5,"));
        assert_eq!(csv.lines().count(), 1 + 6 * 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ch = channel(7);
        let back = DdpmChannel::from_checkpoint(&Checkpoint::from_text(&ch.to_checkpoint().to_text()).unwrap())
            .unwrap();
        assert_eq!(back, ch);
    }

    #[test]
    fn zero_predictor_loss_is_block_len() {
        let den = ConditionalDenoiser::new(7, 2, 20, 8, 1, &mut make_rng_stream(0, "z")).unwrap();
        let specs = den.net().specs();
        let den = ConditionalDenoiser::from_parts(
            crate::numkit::Mlp::zeros(&specs).unwrap(),
            den.t_embed().clone(),
            den.m_embed().clone(),
        )
        .unwrap();
        let sched = NoiseSchedule::constant(20, 0.05).unwrap();
        let rows = 20_000;
        let fm = Tensor::filled(vec![rows, 7], 1.0);
        let x0 = Tensor::filled(vec![rows, 7], 0.5);
        let ms = vec![1; rows];
        let batch = DiffusionBatch { messages: &ms, fm: &fm, x0: &x0 };
        let (loss, _) = diffusion_loss(&den, batch, &sched, &mut make_rng_stream(0, "l")).unwrap();
        // ‖z‖² ~ χ²₇ has variance 14, so the batch mean has sd √(14/20000).
        let se = (14.0f64 / rows as f64).sqrt();
        assert!((loss - 7.0).abs() < 4.0 * se, "loss {loss}");
    }
}
