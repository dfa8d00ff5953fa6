//! Ground-truth channel simulators and 16-QAM reference modulation.
//!
//! Noise convention: unit average energy per real dimension and `N0 = 2σ²`,
//! so `σ = (2·R·10^(Eb/N0 / 10))^(-1/2)` with `R` information bits per real
//! dimension.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numkit::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EbN0Spec {
    pub ebn0_db: f64,
    /// Information bits per real channel dimension, `log2(M) / n`.
    pub rate: f64,
}

impl EbN0Spec {
    pub fn new(ebn0_db: f64, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) || !ebn0_db.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "Eb/N0 spec needs a finite dB value and positive rate, got ({ebn0_db}, {rate})"
            )));
        }
        Ok(Self { ebn0_db, rate })
    }

    /// Spec for an `M`-message code over `n` real dimensions.
    pub fn for_code(ebn0_db: f64, messages: usize, block_len: usize) -> Result<Self> {
        Self::new(ebn0_db, (messages as f64).log2() / block_len as f64)
    }
}

/// Per-dimension noise standard deviation for an Eb/N0 operating point.
pub fn ebn0_to_sigma(spec: EbN0Spec) -> f64 {
    let ebn0 = 10f64.powf(spec.ebn0_db / 10.0);
    1.0 / (2.0 * spec.rate * ebn0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayleighParams {
    sigma_r: f64,
}

impl RayleighParams {
    pub fn new(sigma_r: f64) -> Result<Self> {
        if sigma_r > 0.0 && sigma_r.is_finite() {
            Ok(Self { sigma_r })
        } else {
            Err(Error::InvalidArgument(format!(
                "Rayleigh scale must be positive, got {sigma_r}"
            )))
        }
    }

    pub fn sigma_r(&self) -> f64 {
        self.sigma_r
    }

    pub fn mean(&self) -> f64 {
        self.sigma_r * (std::f64::consts::PI / 2.0).sqrt()
    }

    pub fn variance(&self) -> f64 {
        (2.0 - std::f64::consts::PI / 2.0) * self.sigma_r * self.sigma_r
    }
}

/// Gray-coded PAM-4 levels indexed by a 2-bit label.
const PAM4_GRAY: [f64; 4] = [-3.0, -1.0, 3.0, 1.0];

/// Gray-mapped, unit-energy 16-QAM point for message `m`: the high two bits
/// select the in-phase level, the low two bits the quadrature level.
pub fn qam16_modulate(m: usize) -> Result<Tensor> {
    if m >= 16 {
        return Err(Error::InvalidArgument(format!(
            "16-QAM message index must be < 16, got {m}"
        )));
    }
    let scale = 10f64.sqrt();
    let i = PAM4_GRAY[m >> 2] / scale;
    let q = PAM4_GRAY[m & 3] / scale;
    Ok(Tensor::from_parts(vec![2], vec![i, q]))
}

/// All sixteen points as a `(16, 2)` matrix, row `m` = `qam16_modulate(m)`.
pub fn qam16_constellation() -> Tensor {
    let data = (0..16)
        .flat_map(|m| qam16_modulate(m).expect("index < 16").into_data())
        .collect();
    Tensor::from_parts(vec![16, 2], data)
}

/// `y = x + σ·z`, `z` iid standard normal.
pub fn awgn_apply<R: Rng + ?Sized>(x: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    check_sigma(sigma)?;
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Real Rayleigh fading `y = h∘x + σ·z`. Each gain is drawn as
/// `σ_R·√(g₁² + g₂²)`; the gains are returned for diagnostics only.
pub fn rayleigh_apply<R: Rng + ?Sized>(
    x: &Tensor,
    sigma: f64,
    params: RayleighParams,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    check_sigma(sigma)?;
    let mut y = Vec::with_capacity(x.len());
    let mut h = Vec::with_capacity(x.len());
    for &v in x.data() {
        let g1: f64 = StandardNormal.sample(rng);
        let g2: f64 = StandardNormal.sample(rng);
        let gain = params.sigma_r * g1.hypot(g2);
        let z: f64 = StandardNormal.sample(rng);
        h.push(gain);
        y.push(gain * v + sigma * z);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        Tensor::from_parts(x.shape().to_vec(), h),
    ))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "noise sigma must be non-negative, got {sigma}"
        )))
    }
}

/// Which physical channel to simulate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelModel {
    Awgn,
    Rayleigh(RayleighParams),
}

impl ChannelModel {
    /// Passes `x` through the channel, returning the output and the
    /// per-entry gain (all ones for AWGN).
    pub fn apply<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        sigma: f64,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor)> {
        match self {
            ChannelModel::Awgn => Ok((
                awgn_apply(x, sigma, rng)?,
                Tensor::filled(x.shape().to_vec(), 1.0),
            )),
            ChannelModel::Rayleigh(p) => rayleigh_apply(x, sigma, *p, rng),
        }
    }
}

impl fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelModel::Awgn => f.write_str("awgn"),
            ChannelModel::Rayleigh(p) => write!(f, "rayleigh(sigma_r={})", p.sigma_r),
        }
    }
}

/// Nearest 16-QAM point; each axis is decided independently.
pub fn qam16_detect(y: &[f64]) -> usize {
    let scale = 10f64.sqrt();
    let level = |v: f64| -> usize {
        let u = v * scale;
        if u < -2.0 {
            0
        } else if u < 0.0 {
            1
        } else if u < 2.0 {
            3
        } else {
            2
        }
    };
    (level(y[0]) << 2) | level(y[1])
}

/// Monte-Carlo symbol error rate of minimum-distance 16-QAM detection over
/// AWGN with per-dimension noise `sigma`.
pub fn qam16_awgn_ser_oracle<R: Rng + ?Sized>(
    sigma: f64,
    num_symbols: usize,
    rng: &mut R,
) -> Result<f64> {
    check_sigma(sigma)?;
    if num_symbols < 100_000 {
        return Err(Error::InvalidArgument(format!(
            "SER oracle needs at least 1e5 symbols, got {num_symbols}"
        )));
    }
    let points = qam16_constellation();
    let mut errors = 0usize;
    for _ in 0..num_symbols {
        let m = rng.random_range(0..16);
        let s = points.row(m);
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        if qam16_detect(&[s[0] + sigma * z0, s[1] + sigma * z1]) != m {
            errors += 1;
        }
    }
    Ok(errors as f64 / num_symbols as f64)
}

/// Exact SER of 16-QAM with minimum-distance detection: per axis the PAM-4
/// error is `p = 1.5·Q(d/σ)` with half-spacing `d = 1/√10`, and the symbol
/// is correct only when both axes are, so `SER = 2p − p²`.
pub fn qam16_awgn_ser_closed_form(sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let d = 1.0 / 10f64.sqrt();
    let q = 0.5 * libm::erfc(d / sigma / std::f64::consts::SQRT_2);
    let p = 1.5 * q;
    2.0 * p - p * p
}
