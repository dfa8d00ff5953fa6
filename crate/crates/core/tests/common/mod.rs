//! Oracles shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use e2ediff::autoencoder::{ae_loss_and_grads, CodecPair, DifferentiableChannel, ModelAwareChannel, PowerNorm};
use e2ediff::channels::{qam16_awgn_ser_closed_form, qam16_awgn_ser_oracle, ChannelModel, RayleighParams};
use e2ediff::diffusion::{
    diffuse_closed, diffuse_step, mean_from_noise, posterior_moments, ConditionalDenoiser, DdpmChannel,
    NoiseSchedule, ReverseNoise,
};
use e2ediff::numkit::{Activation, LayerSpec, Mlp, Parameterized, Tensor};
use e2ediff::rng::{make_rng_stream, SimRng};
use e2ediff::wgan::{WganChannel, WganPair};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
/// Entries probed per parameter slice.
const PROBES: usize = 24;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn normal_tensor(shape: &[usize], rng: &mut SimRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn probe_indices(len: usize, rng: &mut SimRng) -> Vec<usize> {
    if len <= PROBES {
        (0..len).collect()
    } else {
        (0..PROBES).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Worst relative error between `analytic` and central differences of
/// `loss` over a sample of parameter entries.
pub fn check_params<P: Parameterized + Clone>(
    model: &P,
    analytic: &[&[f64]],
    loss: impl Fn(&P) -> f64,
    rng: &mut SimRng,
) -> f64 {
    let mut worst = 0.0f64;
    for (s, grads) in analytic.iter().enumerate() {
        for j in probe_indices(grads.len(), rng) {
            let mut plus = model.clone();
            plus.param_slices_mut()[s][j] += FD_STEP;
            let mut minus = model.clone();
            minus.param_slices_mut()[s][j] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[j], numeric));
        }
    }
    worst
}

/// Same over the entries of an input tensor.
pub fn check_input(x: &Tensor, analytic: &Tensor, loss: impl Fn(&Tensor) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[j] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[j] -= FD_STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[j], numeric));
    }
    worst
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel: f64,
}

fn push(out: &mut Vec<GradCheck>, name: impl Into<String>, max_rel: f64) {
    out.push(GradCheck {
        name: name.into(),
        max_rel,
    });
}

/// Plain dense stacks with each hidden activation and a linear or softmax
/// head, under a random linear functional of the output.
fn dense_checks(out: &mut Vec<GradCheck>, rng: &mut SimRng) {
    let heads = [Activation::Linear, Activation::Softmax];
    for hidden in [Activation::Elu, Activation::Softplus, Activation::Relu, Activation::Linear] {
        for head in heads {
            let net = Mlp::init(&LayerSpec::chain(&[4, 6, 5, 3], hidden, head), rng).unwrap();
            let x = normal_tensor(&[5, 4], rng);
            let w = normal_tensor(&[5, 3], rng);
            let (_, tape) = net.forward(&x).unwrap();
            let grads = net.backward(&tape, &w).unwrap();
            let loss = |n: &Mlp, x: &Tensor| dot(&n.forward(x).unwrap().0, &w);
            let p = check_params(&net, &grads.param_slices(), |n| loss(n, &x), rng);
            let i = check_input(&x, &grads.input, |x| loss(&net, x));
            push(out, format!("dense {hidden}->{head} params"), p);
            push(out, format!("dense {hidden}->{head} input"), i);
        }
    }
}

/// Softmax head trained by cross-entropy through the logit shortcut.
fn cross_entropy_check(out: &mut Vec<GradCheck>, rng: &mut SimRng) {
    let net = Mlp::init(&LayerSpec::chain(&[7, 16, 16, 16], Activation::Elu, Activation::Softmax), rng).unwrap();
    let y = normal_tensor(&[6, 7], rng);
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..16)).collect();
    let ce = |n: &Mlp| {
        let p = n.forward(&y).unwrap().0;
        labels.iter().enumerate().map(|(i, &m)| -p.row(i)[m].ln()).sum::<f64>() / 6.0
    };
    let (p, tape) = net.forward(&y).unwrap();
    let mut g = p.scale(1.0 / 6.0);
    for (i, &m) in labels.iter().enumerate() {
        g.row_mut(i)[m] -= 1.0 / 6.0;
    }
    let grads = net.backward_from_logits(&tape, &g).unwrap();
    push(out, "softmax cross-entropy logits", check_params(&net, &grads.param_slices(), ce, rng));
}

/// Softplus stack with multiplicative gates on every hidden layer.
fn gated_check(out: &mut Vec<GradCheck>, rng: &mut SimRng) {
    let net = Mlp::init(&LayerSpec::chain(&[4, 5, 5, 2], Activation::Softplus, Activation::Linear), rng).unwrap();
    let x = normal_tensor(&[3, 4], rng);
    let g0 = normal_tensor(&[3, 5], rng).map(|v| 1.0 + 0.3 * v);
    let g1 = normal_tensor(&[3, 5], rng).map(|v| 1.0 + 0.3 * v);
    let w = normal_tensor(&[3, 2], rng);
    let loss = |n: &Mlp, x: &Tensor, a: &Tensor, b: &Tensor| {
        dot(&n.forward_gated(x, &[Some(a), Some(b)]).unwrap().0, &w)
    };
    let (_, tape) = net.forward_gated(&x, &[Some(&g0), Some(&g1)]).unwrap();
    let grads = net.backward(&tape, &w).unwrap();
    push(
        out,
        "gated softplus params",
        check_params(&net, &grads.param_slices(), |n| loss(n, &x, &g0, &g1), rng),
    );
    push(out, "gated softplus input", check_input(&x, &grads.input, |x| loss(&net, x, &g0, &g1)));
    let dg0 = grads.gates[0].as_ref().unwrap();
    let dg1 = grads.gates[1].as_ref().unwrap();
    push(out, "gate 0", check_input(&g0, dg0, |g| loss(&net, &x, g, &g1)));
    push(out, "gate 1", check_input(&g1, dg1, |g| loss(&net, &x, &g0, g)));
}

/// Conditional denoiser: net, both embedding tables, `x_t` and `f(m)`,
/// under `‖ẑ‖²`.
fn denoiser_check(out: &mut Vec<GradCheck>, rng: &mut SimRng) {
    let den = ConditionalDenoiser::new(3, 4, 6, 8, 3, rng).unwrap();
    let x = normal_tensor(&[4, 3], rng);
    let fm = normal_tensor(&[4, 3], rng);
    let steps = [1, 3, 6, 3];
    let msgs = [0, 2, 3, 2];
    let sq = |d: &ConditionalDenoiser, x: &Tensor, fm: &Tensor| {
        let z = d.forward(x, &steps, &msgs, fm).unwrap().0;
        dot(&z, &z)
    };
    let (z, tape) = den.forward(&x, &steps, &msgs, &fm).unwrap();
    let grads = den.backward(&tape, &z.scale(2.0)).unwrap();
    push(
        out,
        "denoiser params+embeddings",
        check_params(&den, &grads.param_slices(), |d| sq(d, &x, &fm), rng),
    );
    push(out, "denoiser x_t", check_input(&x, &grads.x_t, |x| sq(&den, x, &fm)));
    push(out, "denoiser f(m)", check_input(&fm, &grads.fm, |f| sq(&den, &x, f)));
}

/// Encoder with either power normalization, under a linear functional of
/// the codewords.
fn encoder_check(out: &mut Vec<GradCheck>, rng: &mut SimRng) {
    for norm in [PowerNorm::PerCodeword, PowerNorm::BatchAverage] {
        let mut codec = CodecPair::new(8, 5, &[16, 16], rng).unwrap();
        codec.set_power_norm(norm);
        let msgs = [0, 3, 7, 3, 5];
        let w = normal_tensor(&[5, 5], rng);
        let f = |c: &CodecPair| dot(&c.encode_batch(&msgs).unwrap().0, &w);
        let (_, tape) = codec.encode_batch(&msgs).unwrap();
        let g = codec.encode_backward(&tape, &w).unwrap();
        let mut slices = g.param_slices();
        let dec_zero: Vec<Vec<f64>> = codec.decoder().param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        slices.extend(dec_zero.iter().map(Vec::as_slice));
        push(out, format!("encoder {norm}"), check_params(&codec, &slices, f, rng));
    }
}

/// Channel-input gradient of a differentiable channel with its noise frozen
/// by replaying the same stream.
fn channel_input_check<C: DifferentiableChannel>(
    ch: &C,
    fm: &Tensor,
    msgs: &[usize],
    w: &Tensor,
    seed: u64,
) -> f64 {
    let f = |x: &Tensor| {
        let y = ch.forward(x, msgs, &mut make_rng_stream(seed, "frozen")).unwrap().0;
        dot(&y, w)
    };
    let (_, tape) = ch.forward(fm, msgs, &mut make_rng_stream(seed, "frozen")).unwrap();
    let g = ch.backward(&tape, w).unwrap();
    check_input(fm, &g, f)
}

/// Reverse chain of `steps` steps with frozen noise, gradient w.r.t. `f(m)`.
pub fn ddpm_chain_check(steps: usize, rng: &mut SimRng) -> f64 {
    let den = ConditionalDenoiser::new(3, 4, steps, 16, 3, rng).unwrap();
    let sched = NoiseSchedule::constant(steps, 0.05).unwrap();
    let ch = DdpmChannel::new(den, sched, ReverseNoise::SqrtBeta).unwrap();
    let fm = normal_tensor(&[3, 3], rng);
    let w = normal_tensor(&[3, 3], rng).scale(1.0 / 3.0);
    channel_input_check(&ch, &fm, &[0, 1, 3], &w, 5)
}

pub fn wgan_generator_check(rng: &mut SimRng) -> f64 {
    let pair = WganPair::new(4, 16, rng).unwrap();
    let ch = WganChannel { pair };
    let fm = normal_tensor(&[3, 4], rng);
    let w = normal_tensor(&[3, 4], rng);
    channel_input_check(&ch, &fm, &[0, 1, 2], &w, 9)
}

/// End-to-end codec gradient (cross-entropy) through the true channel with
/// frozen noise.
pub fn e2e_check(model: ChannelModel, rng: &mut SimRng) -> f64 {
    let codec = CodecPair::new(16, 7, &[16, 16], rng).unwrap();
    let ch = ModelAwareChannel::new(model, 0.5);
    let msgs: Vec<usize> = (0..12).map(|i| i % 16).collect();
    let loss = |c: &CodecPair| {
        ae_loss_and_grads(c, &ch, &msgs, &mut make_rng_stream(3, "e2e")).unwrap().0
    };
    let (_, grads) = ae_loss_and_grads(&codec, &ch, &msgs, &mut make_rng_stream(3, "e2e")).unwrap();
    let mut slices = grads.encoder.param_slices();
    slices.extend(grads.decoder.param_slices());
    check_params(&codec, &slices, loss, rng)
}

/// Every layer, activation, gate and composite path in the crate.
pub fn gradient_battery() -> Vec<GradCheck> {
    let mut rng = make_rng_stream(2024, "gradcheck");
    let mut out = Vec::new();
    dense_checks(&mut out, &mut rng);
    cross_entropy_check(&mut out, &mut rng);
    gated_check(&mut out, &mut rng);
    denoiser_check(&mut out, &mut rng);
    encoder_check(&mut out, &mut rng);
    push(&mut out, "wgan generator f(m)", wgan_generator_check(&mut rng));
    push(&mut out, "ddpm 3-step chain f(m)", ddpm_chain_check(3, &mut rng));
    push(&mut out, "e2e awgn", e2e_check(ChannelModel::Awgn, &mut rng));
    push(
        &mut out,
        "e2e rayleigh",
        e2e_check(ChannelModel::Rayleigh(RayleighParams::new(1.0).unwrap()), &mut rng),
    );
    out
}

/// Iterated single steps vs the closed form from a fixed `x0`: worst
/// z-score over dims of the mean and variance differences at each `t`.
pub fn moment_agreement(t_values: &[usize], samples: usize) -> Vec<(usize, f64)> {
    let sched = NoiseSchedule::constant(100, 0.05).unwrap();
    let x0_row = [0.7, -1.2];
    let x0 = Tensor::from_rows(&vec![x0_row.to_vec(); samples]).unwrap();
    let mut iter_rng = make_rng_stream(1, "moments.iter");
    let mut closed_rng = make_rng_stream(1, "moments.closed");
    let mut x = x0.clone();
    let mut out = Vec::new();
    let t_max = *t_values.iter().max().unwrap();
    for t in 1..=t_max {
        x = diffuse_step(&x, t, &sched, &mut iter_rng).unwrap();
        if !t_values.contains(&t) {
            continue;
        }
        let (closed, _) = diffuse_closed(&x0, t, &sched, &mut closed_rng).unwrap();
        let mut worst = 0.0f64;
        for d in 0..2 {
            let col = |m: &Tensor| (0..samples).map(|i| m.row(i)[d]).collect::<Vec<_>>();
            let (a, b) = (col(&x), col(&closed));
            let (ma, va) = mean_var(&a);
            let (mb, vb) = mean_var(&b);
            let n = samples as f64;
            let z_mean = (ma - mb).abs() / (va / n + vb / n).sqrt();
            // Var of a sample variance of Gaussian data is 2σ⁴/(n − 1).
            let z_var = (va - vb).abs() / (2.0 * va * va / (n - 1.0) + 2.0 * vb * vb / (n - 1.0)).sqrt();
            worst = worst.max(z_mean).max(z_var);
        }
        out.push((t, worst));
    }
    out
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Largest gap between the reverse mean computed from the true noise and
/// the posterior mean, over random instances.
pub fn noise_mean_identity(instances: usize) -> f64 {
    let mut rng = make_rng_stream(3, "identity");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let steps = rng.random_range(2..=100);
        let beta: Vec<f64> = (0..steps).map(|_| rng.random_range(1e-4..0.2)).collect();
        let sched = NoiseSchedule::new(beta).unwrap();
        let t = rng.random_range(2..=steps);
        let x0 = normal_tensor(&[1, 3], &mut rng);
        let (x_t, z0) = diffuse_closed(&x0, t, &sched, &mut rng).unwrap();
        let from_noise = mean_from_noise(&x_t, &z0, t, &sched).unwrap();
        let (mu, _) = posterior_moments(&x_t, &x0, t, &sched).unwrap();
        worst = worst.max(from_noise.sub(&mu).unwrap().max_abs());
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct SerAgreement {
    pub sigma: f64,
    pub simulated: f64,
    pub closed_form: f64,
    pub z: f64,
}

pub fn ser_oracle_agreement(sigmas: &[f64], symbols: usize) -> Vec<SerAgreement> {
    sigmas
        .iter()
        .map(|&sigma| {
            let mut rng = make_rng_stream(8, &format!("qam.{sigma}"));
            let simulated = qam16_awgn_ser_oracle(sigma, symbols, &mut rng).unwrap();
            let closed_form = qam16_awgn_ser_closed_form(sigma);
            let se = (closed_form * (1.0 - closed_form) / symbols as f64).sqrt();
            SerAgreement {
                sigma,
                simulated,
                closed_form,
                z: (simulated - closed_form).abs() / se,
            }
        })
        .collect()
}
