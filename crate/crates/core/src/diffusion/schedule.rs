//! Noise schedule and the closed-form pieces of the forward process.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numkit::Tensor;
use crate::{Error, Result};

/// Precomputed `β_t`, `α_t = 1 − β_t` and `ᾱ_t = ∏_{i≤t} α_i`. Steps are
/// 1-based throughout; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in (0,1), got {b}"
            )));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// `steps` copies of the same `beta`.
    pub fn constant(steps: usize, beta: f64) -> Result<Self> {
        Self::new(vec![beta; steps])
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps()
            )))
        }
    }

    /// Coefficients `(a, b)` of the reverse mean `a·x_t − b·ẑ`.
    pub fn reverse_mean_coefficients(&self, t: usize) -> (f64, f64) {
        let alpha = self.alpha(t);
        let a = 1.0 / alpha.sqrt();
        let b = (1.0 - alpha) / ((1.0 - self.alpha_bar(t)).sqrt() * alpha.sqrt());
        (a, b)
    }
}

/// Schedule from `T` and either one `β` for every step or a full list.
pub fn build_schedule(steps: usize, beta_values: &[f64]) -> Result<NoiseSchedule> {
    match beta_values.len() {
        1 => NoiseSchedule::constant(steps, beta_values[0]),
        n if n == steps => NoiseSchedule::new(beta_values.to_vec()),
        n => Err(Error::InvalidArgument(format!(
            "{n} beta values for {steps} steps"
        ))),
    }
}

/// Scale of the fresh noise added in each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReverseNoise {
    /// Coefficient `β_t`, the reverse update as literally written.
    Beta,
    /// Coefficient `√β_t`, i.e. reverse covariance `β_t·I`.
    #[default]
    SqrtBeta,
}

impl ReverseNoise {
    pub fn coefficient(self, beta: f64) -> f64 {
        match self {
            ReverseNoise::Beta => beta,
            ReverseNoise::SqrtBeta => beta.sqrt(),
        }
    }
}

impl fmt::Display for ReverseNoise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReverseNoise::Beta => "beta",
            ReverseNoise::SqrtBeta => "sqrt_beta",
        })
    }
}

impl FromStr for ReverseNoise {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(ReverseNoise::Beta),
            "sqrt_beta" => Ok(ReverseNoise::SqrtBeta),
            other => Err(Error::InvalidArgument(format!(
                "reverse noise must be `beta` or `sqrt_beta`, got `{other}`"
            ))),
        }
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// One forward step `x_t = √(1−β_t)·x_{t−1} + √β_t·z`.
pub fn diffuse_step<R: Rng + ?Sized>(
    x_prev: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let beta = sched.beta(t);
    let z = standard_normal(x_prev.shape(), rng);
    x_prev.scale((1.0 - beta).sqrt()).add(&z.scale(beta.sqrt()))
}

/// Jumps straight to step `t`: `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·z_0`. Returns the
/// noise `z_0` as well, which is the denoiser's regression target.
pub fn diffuse_closed<R: Rng + ?Sized>(
    x0: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    sched.check_step(t)?;
    let z0 = standard_normal(x0.shape(), rng);
    let ab = sched.alpha_bar(t);
    let xt = x0.scale(ab.sqrt()).add(&z0.scale((1.0 - ab).sqrt()))?;
    Ok((xt, z0))
}

/// Mean and variance of `q(x_{t−1} | x_t, x_0)`.
pub fn posterior_moments(
    x_t: &Tensor,
    x0: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor, f64)> {
    sched.check_step(t)?;
    if t < 2 {
        return Err(Error::InvalidArgument(
            "posterior moments need t >= 2".into(),
        ));
    }
    let alpha = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let cx = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let c0 = ab_prev.sqrt() * (1.0 - alpha) / (1.0 - ab);
    let mean = x_t.scale(cx).add(&x0.scale(c0))?;
    let var = (1.0 - alpha) * (1.0 - ab_prev) / (1.0 - ab);
    Ok((mean, var))
}

/// Reverse-process mean written through the noise: `a·x_t − b·z`. With the
/// true `z_0` this equals the posterior mean exactly.
pub fn mean_from_noise(x_t: &Tensor, z: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let (a, b) = sched.reverse_mean_coefficients(t);
    x_t.scale(a).sub(&z.scale(b))
}

/// One reverse step given the predicted noise. No fresh noise is added when
/// `final_step` is set.
pub fn denoise_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    t: usize,
    zhat: &Tensor,
    sched: &NoiseSchedule,
    noise: ReverseNoise,
    rng: &mut R,
    final_step: bool,
) -> Result<Tensor> {
    let fresh = if final_step {
        None
    } else {
        Some(standard_normal(x_t.shape(), rng))
    };
    denoise_step_with(x_t, t, zhat, sched, noise, fresh.as_ref())
}

/// [`denoise_step`] with an explicit noise draw.
pub fn denoise_step_with(
    x_t: &Tensor,
    t: usize,
    zhat: &Tensor,
    sched: &NoiseSchedule,
    noise: ReverseNoise,
    fresh: Option<&Tensor>,
) -> Result<Tensor> {
    let mut x = mean_from_noise(x_t, zhat, t, sched)?;
    if let Some(z) = fresh {
        x.axpy(noise.coefficient(sched.beta(t)), z)?;
    }
    Ok(x)
}
