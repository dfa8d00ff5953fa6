//! Alternating optimization of the codec and its channel surrogate.
//!
//! Each phase first fits the surrogate to fresh `(f(m), y)` pairs drawn from
//! the real channel with the current encoder, then trains the codec through
//! the frozen surrogate. Early phases spend most epochs on the surrogate;
//! once the constellation stops moving the schedule switches to late phases
//! that favour the codec.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autoencoder::{ae_train_step, CodecOptimizers, CodecPair, ModelAwareChannel, PowerNorm};
use crate::channels::{ebn0_to_sigma, ChannelModel, EbN0Spec, RayleighParams};
use crate::diffusion::{
    build_schedule, diffusion_train_step, ConditionalDenoiser, DdpmChannel, DiffusionBatch,
    NoiseSchedule, ReverseNoise,
};
use crate::numkit::{Checkpoint, OptimizerConfig, OptimizerKind, OptimizerState, Parameterized, Tensor};
use crate::wgan::{critic_step, generator_step, WganChannel, WganOptimizers, WganPair};
use crate::{Error, Result};

pub use crate::rng::{make_rng_stream, SimRng};

/// Learning rate stepped geometrically from `initial` to `last` across
/// phase boundaries; constant within a phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrRange {
    pub initial: f64,
    pub last: f64,
}

impl LrRange {
    pub fn new(initial: f64, last: f64) -> Self {
        Self { initial, last }
    }

    pub fn constant(lr: f64) -> Self {
        Self::new(lr, lr)
    }

    /// Rate for slot `index` of `slots`.
    pub fn at(&self, index: usize, slots: usize) -> f64 {
        if slots <= 1 || self.initial == self.last {
            return self.initial;
        }
        let frac = index.min(slots - 1) as f64 / (slots - 1) as f64;
        self.initial * (self.last / self.initial).powf(frac)
    }
}

/// `phases` repetitions of `(gen_epochs, ae_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseSpec {
    pub phases: usize,
    pub gen_epochs: usize,
    pub ae_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlternationSchedule {
    pub early: PhaseSpec,
    pub late: PhaseSpec,
    /// Early phases end once drift stays below this for `drift_patience`
    /// consecutive phases.
    pub drift_threshold: f64,
    pub drift_patience: usize,
}

impl Default for AlternationSchedule {
    fn default() -> Self {
        Self {
            early: PhaseSpec {
                phases: 5,
                gen_epochs: 50,
                ae_epochs: 5,
            },
            late: PhaseSpec {
                phases: 5,
                gen_epochs: 10,
                ae_epochs: 50,
            },
            drift_threshold: 0.05,
            drift_patience: 2,
        }
    }
}

impl AlternationSchedule {
    /// Learning-rate slots: early phase `i` uses slot `i`, late phase `j`
    /// uses slot `early.phases + j`, so the last phase always gets the final
    /// rate even after an early switch.
    pub fn slots(&self) -> usize {
        self.early.phases + self.late.phases
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    ModelAware,
    Ddpm,
    Wgan,
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SurrogateKind::ModelAware => "model_aware",
            SurrogateKind::Ddpm => "ddpm",
            SurrogateKind::Wgan => "wgan",
        })
    }
}

impl FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model_aware" => Ok(SurrogateKind::ModelAware),
            "ddpm" => Ok(SurrogateKind::Ddpm),
            "wgan" => Ok(SurrogateKind::Wgan),
            _ => Err(Error::InvalidArgument(format!(
                "unknown surrogate `{s}` (expected model_aware, ddpm or wgan)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    /// One value for a constant schedule, otherwise one per step.
    pub beta: Vec<f64>,
    pub reverse_noise: ReverseNoise,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub lr: LrRange,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta: vec![0.05],
            reverse_noise: ReverseNoise::default(),
            hidden: 64,
            hidden_layers: 3,
            lr: LrRange::new(1e-3, 1e-5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WganConfig {
    pub hidden: usize,
    pub clip_c: f64,
    pub n_critic: usize,
    pub lr: LrRange,
}

impl Default for WganConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            clip_c: crate::wgan::DEFAULT_CLIP,
            n_critic: crate::wgan::DEFAULT_N_CRITIC,
            lr: LrRange::constant(1e-4),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub messages: usize,
    pub block_len: usize,
    pub channel: ChannelModel,
    pub train_ebn0_db: f64,
    pub surrogate: SurrogateKind,
    pub codec_hidden: Vec<usize>,
    pub power_norm: PowerNorm,
    pub dataset_size: usize,
    pub batch_size: usize,
    pub ae_lr: LrRange,
    pub diffusion: DiffusionConfig,
    pub wgan: WganConfig,
    pub schedule: AlternationSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            messages: 16,
            block_len: 7,
            channel: ChannelModel::Awgn,
            train_ebn0_db: 5.0,
            surrogate: SurrogateKind::Ddpm,
            codec_hidden: vec![16, 16],
            power_norm: PowerNorm::PerCodeword,
            dataset_size: 100_000,
            batch_size: 3000,
            ae_lr: LrRange::constant(1e-3),
            diffusion: DiffusionConfig::default(),
            wgan: WganConfig::default(),
            schedule: AlternationSchedule::default(),
        }
    }
}

fn field_err(field: &str, msg: impl Into<String>) -> Error {
    Error::ConfigField {
        field: field.into(),
        msg: msg.into(),
    }
}

fn check_lr(field: &str, lr: LrRange) -> Result<()> {
    if lr.initial > 0.0 && lr.last > 0.0 && lr.initial.is_finite() && lr.last.is_finite() {
        Ok(())
    } else {
        Err(field_err(field, "learning rates must be positive and finite"))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.messages < 2 {
            return Err(field_err("messages", "need at least 2 messages"));
        }
        if self.block_len == 0 {
            return Err(field_err("block_len", "must be at least 1"));
        }
        if let ChannelModel::Rayleigh(p) = self.channel {
            RayleighParams::new(p.sigma_r()).map_err(|e| field_err("channel.sigma_r", e.to_string()))?;
        }
        if !self.train_ebn0_db.is_finite() {
            return Err(field_err("train_ebn0_db", "must be finite"));
        }
        if self.codec_hidden.contains(&0) {
            return Err(field_err("codec.hidden", "widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(field_err("batch_size", "must be at least 1"));
        }
        if self.dataset_size < self.batch_size {
            return Err(field_err("dataset_size", "must be at least batch_size"));
        }
        check_lr("ae.lr", self.ae_lr)?;
        check_lr("diffusion.lr", self.diffusion.lr)?;
        check_lr("wgan.lr", self.wgan.lr)?;
        self.noise_schedule()?;
        if self.diffusion.hidden == 0 || self.diffusion.hidden_layers == 0 {
            return Err(field_err("diffusion.hidden", "network must have a hidden layer"));
        }
        if self.wgan.hidden == 0 {
            return Err(field_err("wgan.hidden", "must be positive"));
        }
        if !(self.wgan.clip_c > 0.0 && self.wgan.clip_c.is_finite()) {
            return Err(field_err("wgan.clip_c", "must be positive"));
        }
        if self.wgan.n_critic == 0 {
            return Err(field_err("wgan.n_critic", "must be at least 1"));
        }
        if self.schedule.slots() == 0 {
            return Err(field_err("schedule", "at least one phase is required"));
        }
        if self.schedule.drift_threshold.is_nan() || self.schedule.drift_threshold < 0.0 {
            return Err(field_err("schedule.drift_threshold", "must be non-negative"));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let field = if self.diffusion.beta.len() == 1 { "diffusion.beta_t" } else { "diffusion.T" };
        build_schedule(self.diffusion.steps, &self.diffusion.beta)
            .map_err(|e| field_err(field, e.to_string().trim_start_matches("invalid argument: ")))
    }

    /// Per-dimension noise standard deviation at the training Eb/N0.
    pub fn train_sigma(&self) -> Result<f64> {
        Ok(ebn0_to_sigma(EbN0Spec::for_code(
            self.train_ebn0_db,
            self.messages,
            self.block_len,
        )?))
    }
}

/// The trained channel stand-in.
#[derive(Debug, Clone, PartialEq)]
pub enum Surrogate {
    ModelAware(ModelAwareChannel),
    Ddpm(DdpmChannel),
    Wgan(WganChannel),
}

impl Surrogate {
    pub fn kind(&self) -> SurrogateKind {
        match self {
            Surrogate::ModelAware(_) => SurrogateKind::ModelAware,
            Surrogate::Ddpm(_) => SurrogateKind::Ddpm,
            Surrogate::Wgan(_) => SurrogateKind::Wgan,
        }
    }

    /// Channel outputs for inputs `fm` labelled by `messages`.
    pub fn sample(&self, fm: &Tensor, messages: &[usize], rng: &mut SimRng) -> Result<Tensor> {
        use crate::autoencoder::DifferentiableChannel;
        match self {
            Surrogate::ModelAware(c) => c.sample(fm, messages, rng),
            Surrogate::Ddpm(c) => c.sample(fm, messages, rng),
            Surrogate::Wgan(c) => c.sample(fm, messages, rng),
        }
    }

    pub fn checksum(&self) -> String {
        match self {
            Surrogate::ModelAware(c) => {
                let mut h = Sha256::new();
                h.update(c.model.to_string().as_bytes());
                h.update(c.sigma.to_le_bytes());
                hex::encode(h.finalize())
            }
            Surrogate::Ddpm(c) => c.checksum(),
            Surrogate::Wgan(c) => c.checksum(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Surrogate::ModelAware(c) => {
                let sigma_r = match c.model {
                    ChannelModel::Awgn => 0.0,
                    ChannelModel::Rayleigh(p) => p.sigma_r(),
                };
                let channel = match c.model {
                    ChannelModel::Awgn => "awgn",
                    ChannelModel::Rayleigh(_) => "rayleigh",
                };
                Checkpoint::new("model_aware")
                    .with_meta("channel", channel)
                    .with_meta("sigma_r", format!("{sigma_r:e}"))
                    .with_meta("sigma", format!("{:e}", c.sigma))
            }
            Surrogate::Ddpm(c) => c.to_checkpoint(),
            Surrogate::Wgan(c) => c.pair.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        match ck.kind() {
            "model_aware" => {
                let model = match ck.meta("channel")? {
                    "awgn" => ChannelModel::Awgn,
                    "rayleigh" => ChannelModel::Rayleigh(RayleighParams::new(ck.meta_parse("sigma_r")?)?),
                    other => return Err(Error::Checkpoint(format!("unknown channel `{other}`"))),
                };
                Ok(Surrogate::ModelAware(ModelAwareChannel::new(model, ck.meta_parse("sigma")?)))
            }
            "ddpm" => Ok(Surrogate::Ddpm(DdpmChannel::from_checkpoint(ck)?)),
            "wgan" => Ok(Surrogate::Wgan(WganChannel {
                pair: WganPair::from_checkpoint(ck)?,
            })),
            other => Err(Error::Checkpoint(format!("`{other}` is not a surrogate checkpoint"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Mean of `‖prev_m − curr_m‖ / √n` over the codebook rows.
pub fn constellation_drift(prev: &Tensor, curr: &Tensor) -> Result<f64> {
    if prev.shape() != curr.shape() || prev.shape().len() != 2 || prev.rows() == 0 {
        return Err(Error::Shape(format!(
            "constellations {:?} and {:?} are not comparable",
            prev.shape(),
            curr.shape()
        )));
    }
    let n = prev.cols() as f64;
    let diff = prev.sub(curr)?;
    let total: f64 = diff.row_sq_norms().iter().map(|s| (s / n).sqrt()).sum();
    Ok(total / prev.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Early,
    Late,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Early => "early",
            PhaseKind::Late => "late",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub index: usize,
    pub kind: PhaseKind,
    pub gen_lr: f64,
    pub ae_lr: f64,
    /// Per-epoch surrogate objective: noise-prediction MSE for the DDPM,
    /// the critic's Wasserstein estimate for the WGAN.
    pub gen_losses: Vec<f64>,
    pub ae_losses: Vec<f64>,
    pub drift: f64,
    pub codec_checksum_gen: (String, String),
    pub surrogate_checksum_ae: (String, String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub phases: Vec<PhaseReport>,
    pub wall_clock_secs: f64,
    pub codec_checksum: String,
    pub surrogate_checksum: String,
}

impl TrainReport {
    pub fn drift_trace(&self) -> Vec<f64> {
        self.phases.iter().map(|p| p.drift).collect()
    }

    /// `phase,kind,stage,epoch,loss,lr` for every executed epoch.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("phase,kind,stage,epoch,loss,lr\n");
        for p in &self.phases {
            for (stage, losses, lr) in [("gen", &p.gen_losses, p.gen_lr), ("ae", &p.ae_losses, p.ae_lr)] {
                for (e, l) in losses.iter().enumerate() {
                    writeln!(out, "{},{},{stage},{e},{l:e},{lr:e}", p.index, p.kind).unwrap();
                }
            }
        }
        out
    }

    /// `phase,kind,drift`.
    pub fn drift_csv(&self) -> String {
        let mut out = String::from("phase,kind,drift\n");
        for p in &self.phases {
            writeln!(out, "{},{},{:e}", p.index, p.kind, p.drift).unwrap();
        }
        out
    }

    /// Human-readable summary; wall-clock is the only nondeterministic line.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        writeln!(out, "phases {}", self.phases.len()).unwrap();
        for p in &self.phases {
            writeln!(
                out,
                "phase {} {} gen_epochs {} ae_epochs {} gen_loss {} ae_loss {} drift {:.6}",
                p.index,
                p.kind,
                p.gen_losses.len(),
                p.ae_losses.len(),
                last_or_na(&p.gen_losses),
                last_or_na(&p.ae_losses),
                p.drift
            )
            .unwrap();
        }
        writeln!(out, "codec_checksum {}", self.codec_checksum).unwrap();
        writeln!(out, "surrogate_checksum {}", self.surrogate_checksum).unwrap();
        writeln!(out, "wall_clock_secs {:.3}", self.wall_clock_secs).unwrap();
        out
    }
}

fn last_or_na(v: &[f64]) -> String {
    v.last().map_or_else(|| "na".into(), |l| format!("{l:.6}"))
}

/// Real-channel training pairs for one phase.
#[derive(Debug, Clone)]
pub struct ChannelData {
    pub messages: Vec<usize>,
    pub fm: Tensor,
    pub y: Tensor,
}

impl ChannelData {
    /// Sends `codebook[messages[i]]` through the real channel.
    pub fn sample(
        codebook: &Tensor,
        messages: &[usize],
        channel: ChannelModel,
        sigma: f64,
        rng: &mut SimRng,
    ) -> Result<Self> {
        let fm = codebook.select_rows(messages)?;
        let (y, _) = channel.apply(&fm, sigma, rng)?;
        Ok(Self {
            messages: messages.to_vec(),
            fm,
            y,
        })
    }
}

enum SurrogateOpt {
    None,
    Ddpm(OptimizerState),
    Wgan { opts: WganOptimizers, critic_steps: u64 },
}

impl SurrogateOpt {
    fn new(surrogate: &Surrogate) -> Result<Self> {
        Ok(match surrogate {
            Surrogate::ModelAware(_) => SurrogateOpt::None,
            Surrogate::Ddpm(c) => SurrogateOpt::Ddpm(OptimizerState::for_params(
                OptimizerConfig::new(OptimizerKind::Adam, 1e-3),
                &c.denoiser,
            )?),
            Surrogate::Wgan(c) => SurrogateOpt::Wgan {
                opts: WganOptimizers::rmsprop(&c.pair, 1e-4)?,
                critic_steps: 0,
            },
        })
    }

    fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        match self {
            SurrogateOpt::None => Ok(()),
            SurrogateOpt::Ddpm(o) => o.set_learning_rate(lr),
            SurrogateOpt::Wgan { opts, .. } => opts.set_learning_rate(lr),
        }
    }
}

fn batches(len: usize, batch_size: usize, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One pass over `data`; returns the mean per-batch objective.
fn surrogate_epoch(
    surrogate: &mut Surrogate,
    opt: &mut SurrogateOpt,
    data: &ChannelData,
    batch_size: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let chunks = batches(data.messages.len(), batch_size, rng);
    let mut total = 0.0;
    for idx in &chunks {
        let fm = data.fm.select_rows(idx)?;
        let y = data.y.select_rows(idx)?;
        let messages: Vec<usize> = idx.iter().map(|&i| data.messages[i]).collect();
        total += match (&mut *surrogate, &mut *opt) {
            (Surrogate::Ddpm(ch), SurrogateOpt::Ddpm(o)) => {
                let batch = DiffusionBatch {
                    messages: &messages,
                    fm: &fm,
                    x0: &y,
                };
                diffusion_train_step(&mut ch.denoiser, o, batch, &ch.schedule, rng)?
            }
            (Surrogate::Wgan(ch), SurrogateOpt::Wgan { opts, critic_steps }) => {
                let (fake, _) = ch.pair.generate_batch(&fm, rng)?;
                let loss = critic_step(&mut ch.pair, &y, &fake, &fm, &mut opts.critic)?;
                *critic_steps += 1;
                if *critic_steps % ch.pair.n_critic as u64 == 0 {
                    generator_step(&mut ch.pair, &fm, &mut opts.generator, rng)?;
                }
                -loss
            }
            _ => return Ok(0.0),
        };
    }
    Ok(total / chunks.len() as f64)
}

fn ae_epoch(
    codec: &mut CodecPair,
    surrogate: &Surrogate,
    opts: &mut CodecOptimizers,
    dataset: &[usize],
    batch_size: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    let chunks = batches(dataset.len(), batch_size, rng);
    let mut total = 0.0;
    for idx in &chunks {
        let messages: Vec<usize> = idx.iter().map(|&i| dataset[i]).collect();
        total += match surrogate {
            Surrogate::ModelAware(c) => ae_train_step(codec, c, &messages, opts, rng)?,
            Surrogate::Ddpm(c) => ae_train_step(codec, c, &messages, opts, rng)?,
            Surrogate::Wgan(c) => ae_train_step(codec, c, &messages, opts, rng)?,
        };
    }
    Ok(total / chunks.len() as f64)
}

fn wrap(phase: usize, stage: &'static str, epoch: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Training {
        phase,
        stage,
        epoch,
        source: Box::new(e),
    }
}

/// Fresh surrogate for `cfg` with conditioning over `messages` labels and
/// codewords of width `block_len`.
pub fn init_surrogate(cfg: &RunConfig, rng: &mut SimRng) -> Result<Surrogate> {
    Ok(match cfg.surrogate {
        SurrogateKind::ModelAware => {
            Surrogate::ModelAware(ModelAwareChannel::new(cfg.channel, cfg.train_sigma()?))
        }
        SurrogateKind::Ddpm => {
            let d = &cfg.diffusion;
            let den = ConditionalDenoiser::new(
                cfg.block_len,
                cfg.messages,
                d.steps,
                d.hidden,
                d.hidden_layers,
                rng,
            )?;
            Surrogate::Ddpm(DdpmChannel::new(den, cfg.noise_schedule()?, d.reverse_noise)?)
        }
        SurrogateKind::Wgan => {
            let w = cfg.wgan;
            let pair = WganPair::new(cfg.block_len, cfg.wgan.hidden, rng)?;
            let mut pair = WganPair::from_parts(pair.generator, pair.critic, w.clip_c, w.n_critic)?;
            pair.critic.clip_params(w.clip_c);
            Surrogate::Wgan(WganChannel { pair })
        }
    })
}

fn surrogate_lr(cfg: &RunConfig) -> LrRange {
    match cfg.surrogate {
        SurrogateKind::Wgan => cfg.wgan.lr,
        _ => cfg.diffusion.lr,
    }
}

/// Uniform message labels for the training set.
pub fn draw_dataset(cfg: &RunConfig) -> Vec<usize> {
    let mut rng = make_rng_stream(cfg.seed, "dataset");
    (0..cfg.dataset_size)
        .map(|_| rng.random_range(0..cfg.messages))
        .collect()
}

/// Everything visible after a phase completes.
pub struct PhaseSnapshot<'a> {
    pub report: &'a PhaseReport,
    pub codec: &'a CodecPair,
    pub surrogate: &'a Surrogate,
}

pub fn alternate_train(cfg: &RunConfig) -> Result<(CodecPair, Surrogate, TrainReport)> {
    alternate_train_with(cfg, |_| Ok(()))
}

/// [`alternate_train`] with a hook called after every phase, e.g. to write
/// checkpoints.
pub fn alternate_train_with(
    cfg: &RunConfig,
    mut on_phase: impl FnMut(PhaseSnapshot<'_>) -> Result<()>,
) -> Result<(CodecPair, Surrogate, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let sigma = cfg.train_sigma()?;
    let mut codec = CodecPair::new(
        cfg.messages,
        cfg.block_len,
        &cfg.codec_hidden,
        &mut make_rng_stream(cfg.seed, "init.codec"),
    )?;
    codec.set_power_norm(cfg.power_norm);
    let mut surrogate = init_surrogate(cfg, &mut make_rng_stream(cfg.seed, "init.surrogate"))?;
    let mut gen_opt = SurrogateOpt::new(&surrogate)?;
    let mut ae_opts = CodecOptimizers::new(
        OptimizerConfig::new(OptimizerKind::NAdam, cfg.ae_lr.initial),
        &codec,
    )?;
    let dataset = draw_dataset(cfg);
    let sched = cfg.schedule;
    let slots = sched.slots();
    let gen_lr = surrogate_lr(cfg);
    let skip_gen = cfg.surrogate == SurrogateKind::ModelAware;

    let mut phases = Vec::new();
    let mut prev_book = codec.codebook()?;
    let mut calm = 0;
    let mut early_done = 0;
    let mut late_done = 0;
    loop {
        let (kind, slot, spec) = if early_done < sched.early.phases && calm < sched.drift_patience.max(1) {
            (PhaseKind::Early, early_done, sched.early)
        } else if late_done < sched.late.phases {
            (PhaseKind::Late, sched.early.phases + late_done, sched.late)
        } else {
            break;
        };
        let index = phases.len();
        let g_lr = gen_lr.at(slot, slots);
        let a_lr = cfg.ae_lr.at(slot, slots);
        gen_opt.set_learning_rate(g_lr)?;
        ae_opts.set_learning_rate(a_lr)?;

        let codec_before = codec.checksum();
        let mut gen_losses = Vec::new();
        if !skip_gen && spec.gen_epochs > 0 {
            let mut rng = make_rng_stream(cfg.seed, &format!("phase{index}.gen"));
            let book = codec.codebook().map_err(wrap(index, "gen", 0))?;
            let data = ChannelData::sample(&book, &dataset, cfg.channel, sigma, &mut rng)
                .map_err(wrap(index, "gen", 0))?;
            for epoch in 0..spec.gen_epochs {
                let loss = surrogate_epoch(&mut surrogate, &mut gen_opt, &data, cfg.batch_size, &mut rng)
                    .map_err(wrap(index, "gen", epoch))?;
                gen_losses.push(loss);
            }
        }
        let codec_after = codec.checksum();

        let sur_before = surrogate.checksum();
        let mut ae_losses = Vec::new();
        let mut rng = make_rng_stream(cfg.seed, &format!("phase{index}.ae"));
        for epoch in 0..spec.ae_epochs {
            let loss = ae_epoch(&mut codec, &surrogate, &mut ae_opts, &dataset, cfg.batch_size, &mut rng)
                .map_err(wrap(index, "ae", epoch))?;
            ae_losses.push(loss);
        }
        let sur_after = surrogate.checksum();

        let book = codec.codebook().map_err(wrap(index, "ae", spec.ae_epochs))?;
        let drift = constellation_drift(&prev_book, &book)?;
        prev_book = book;
        if kind == PhaseKind::Early {
            early_done += 1;
            calm = if drift < sched.drift_threshold { calm + 1 } else { 0 };
        } else {
            late_done += 1;
        }
        let report = PhaseReport {
            index,
            kind,
            gen_lr: g_lr,
            ae_lr: a_lr,
            gen_losses,
            ae_losses,
            drift,
            codec_checksum_gen: (codec_before, codec_after),
            surrogate_checksum_ae: (sur_before, sur_after),
        };
        on_phase(PhaseSnapshot {
            report: &report,
            codec: &codec,
            surrogate: &surrogate,
        })?;
        phases.push(report);
    }

    let report = TrainReport {
        phases,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        codec_checksum: codec.checksum(),
        surrogate_checksum: surrogate.checksum(),
    };
    Ok((codec, surrogate, report))
}

/// Fits a surrogate to a fixed constellation (no codec training): every
/// phase runs only its generator epochs, on data resampled per phase.
pub fn train_surrogate_on_constellation(
    cfg: &RunConfig,
    constellation: &Tensor,
) -> Result<(Surrogate, TrainReport)> {
    cfg.validate()?;
    if constellation.rows() != cfg.messages || constellation.cols() != cfg.block_len {
        return Err(Error::Shape(format!(
            "constellation must be ({}, {}), got {:?}",
            cfg.messages,
            cfg.block_len,
            constellation.shape()
        )));
    }
    let started = Instant::now();
    let sigma = cfg.train_sigma()?;
    let mut surrogate = init_surrogate(cfg, &mut make_rng_stream(cfg.seed, "init.surrogate"))?;
    let mut opt = SurrogateOpt::new(&surrogate)?;
    let dataset = draw_dataset(cfg);
    let sched = cfg.schedule;
    let slots = sched.slots();
    let lr = surrogate_lr(cfg);
    let plan = (0..sched.early.phases)
        .map(|i| (PhaseKind::Early, i, sched.early.gen_epochs))
        .chain((0..sched.late.phases).map(|j| (PhaseKind::Late, sched.early.phases + j, sched.late.gen_epochs)));
    let mut phases = Vec::new();
    for (index, (kind, slot, epochs)) in plan.enumerate() {
        let g_lr = lr.at(slot, slots);
        opt.set_learning_rate(g_lr)?;
        let mut rng = make_rng_stream(cfg.seed, &format!("phase{index}.gen"));
        let data = ChannelData::sample(constellation, &dataset, cfg.channel, sigma, &mut rng)
            .map_err(wrap(index, "gen", 0))?;
        let mut gen_losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            gen_losses.push(
                surrogate_epoch(&mut surrogate, &mut opt, &data, cfg.batch_size, &mut rng)
                    .map_err(wrap(index, "gen", epoch))?,
            );
        }
        let checksum = String::new();
        phases.push(PhaseReport {
            index,
            kind,
            gen_lr: g_lr,
            ae_lr: 0.0,
            gen_losses,
            ae_losses: Vec::new(),
            drift: 0.0,
            codec_checksum_gen: (checksum.clone(), checksum.clone()),
            surrogate_checksum_ae: (checksum.clone(), checksum),
        });
    }
    let report = TrainReport {
        phases,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        codec_checksum: String::new(),
        surrogate_checksum: surrogate.checksum(),
    };
    Ok((surrogate, report))
}
