//! Command-line entry point, configs, run directories and recipes.

mod config;
mod recipes;
mod rundir;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{apply_seed_env, load_config, EvalConfig, ExperimentConfig, SeedSource, REQUIRED_KEYS, SEED_ENV};
pub use recipes::{Recipe, Scale};
pub use rundir::{fidelity_plot_script, ser_plot_script, RunDir, CONFIG_FILE, MANIFEST_FILE, SEED_FILE};

use crate::autoencoder::{CodecPair, ModelAwareChannel};
use crate::channels::{qam16_constellation, ChannelModel};
use crate::diffusion::{diffuse_step, trajectory_csv, Condition, DdpmChannel};
use crate::eval::{
    channel_fidelity_report, constellation_csv, norms_csv, ser_sweep, ser_sweep_with, FidelityReport, SerTable,
    SweepConfig,
};
use crate::numkit::Tensor;
use crate::rng::make_rng_stream;
use crate::trainer::{
    alternate_train_with, train_surrogate_on_constellation, Surrogate, TrainReport,
};
use crate::{Error, Result};

pub const CODEC_FILE: &str = "codec.ckpt";
pub const SURROGATE_FILE: &str = "surrogate.ckpt";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const CHECKPOINT: i32 = 4;
    pub const TRAINING: i32 = 5;
    pub const IO: i32 = 6;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ConfigParse { .. } | Error::ConfigField { .. } => exit::CONFIG,
        Error::Checkpoint(_) => exit::CHECKPOINT,
        Error::Training { .. } | Error::NonFinite(_) | Error::Generation { .. } => exit::TRAINING,
        Error::Io(_) => exit::IO,
        _ => exit::FAILURE,
    }
}

fn sweep_config(eval: &EvalConfig) -> SweepConfig {
    SweepConfig {
        min_symbols: eval.min_symbols,
        min_errors: eval.min_errors,
        max_symbols: eval.max_symbols,
        ..SweepConfig::default()
    }
}

/// Trains per `cfg.run`, writing per-phase checkpoints, final checkpoints,
/// loss and drift traces and the report into `dir`.
pub fn run_train(cfg: &ExperimentConfig, dir: &RunDir) -> Result<(CodecPair, Surrogate, TrainReport)> {
    std::fs::create_dir_all(dir.path("checkpoints"))?;
    let (codec, surrogate, report) = alternate_train_with(&cfg.run, |snap| {
        let p = snap.report.index;
        snap.codec.save(dir.path(&format!("checkpoints/phase{p}_codec.ckpt")))?;
        snap.surrogate
            .save(dir.path(&format!("checkpoints/phase{p}_surrogate.ckpt")))
    })?;
    codec.save(dir.path(CODEC_FILE))?;
    surrogate.save(dir.path(SURROGATE_FILE))?;
    write_report(dir, &report)?;
    Ok((codec, surrogate, report))
}

fn write_report(dir: &RunDir, report: &TrainReport) -> Result<()> {
    dir.write("losses.csv", report.losses_csv())?;
    dir.write("drift.csv", report.drift_csv())?;
    dir.write("report.txt", report.summary())?;
    Ok(())
}

/// SER sweep of `codec` on the real channel at `cfg.eval.ebn0_db`.
pub fn run_eval_ser<L: crate::eval::Link + ?Sized>(cfg: &ExperimentConfig, link: &L) -> Result<SerTable> {
    let sweep = sweep_config(&cfg.eval);
    match cfg.eval.sigma_override {
        Some(sigma) => ser_sweep_with(link, cfg.run.channel, &cfg.eval.ebn0_db, sweep, cfg.run.seed, |_| Ok(sigma)),
        None => ser_sweep(link, cfg.run.channel, &cfg.eval.ebn0_db, sweep, cfg.run.seed),
    }
}

/// Fidelity of `surrogate` against the real channel at the training noise
/// level, written as norms/constellation CSVs plus a per-message summary.
pub fn run_fidelity(
    cfg: &ExperimentConfig,
    surrogate: &Surrogate,
    codebook: &Tensor,
    dir: &RunDir,
) -> Result<FidelityReport> {
    let truth = ModelAwareChannel::new(cfg.run.channel, cfg.run.train_sigma()?);
    let report = channel_fidelity_report(&truth, surrogate, codebook, cfg.eval.samples_per_message, cfg.run.seed)?;
    dir.write("norms.csv", norms_csv(&report.norms_generated))?;
    dir.write("norms_true.csv", norms_csv(&report.norms_true))?;
    dir.write("constellation.csv", constellation_csv(&report.constellation_generated))?;
    dir.write("constellation_true.csv", constellation_csv(&report.constellation_true))?;
    dir.write("fidelity.csv", report.summary_csv())?;
    if codebook.cols() == 2 {
        dir.write("plot_fidelity.py", fidelity_plot_script(3.min(codebook.rows() - 1)))?;
    }
    Ok(report)
}

/// Full experiment pipeline for `recipe` into `dir`.
pub fn run_recipe(recipe: Recipe, cfg: &ExperimentConfig, source: SeedSource, dir: &RunDir) -> Result<()> {
    dir.write_config(cfg, source)?;
    match recipe {
        Recipe::Fig2AwgnQam16 => {
            let (surrogate, report) = train_surrogate_on_constellation(&cfg.run, &qam16_constellation())?;
            surrogate.save(dir.path(SURROGATE_FILE))?;
            write_report(dir, &report)?;
            let fid = run_fidelity(cfg, &surrogate, &qam16_constellation(), dir)?;
            dir.write(
                "fidelity_summary.txt",
                format!("max_ks {:.6}\nks_m3 {:.6}\n", fid.max_ks(), fid.per_message[3].ks),
            )?;
        }
        Recipe::Fig3AwgnE2e | Recipe::Fig4RayleighE2e => {
            let mut names = Vec::new();
            for &kind in &cfg.eval.surrogates {
                let sub = dir.child(&kind.to_string())?;
                let mut c = cfg.clone();
                c.run.surrogate = kind;
                let (codec, _, _) = run_train(&c, &sub)?;
                run_eval_ser(&c, &codec)?.write_csv(sub.path("ser.csv"))?;
                names.push(kind.to_string());
            }
            let title = match cfg.run.channel {
                ChannelModel::Awgn => "AWGN",
                ChannelModel::Rayleigh(_) => "Rayleigh fading",
            };
            dir.write("plot_ser.py", ser_plot_script(&names, title))?;
        }
    }
    dir.write_manifest()
}

/// Forward-diffusion and reverse-chain snapshots every `every` steps.
///
/// The forward chain starts from `source_mean + source_std·N(0, I)`; the
/// reverse chain generates for message `message` with codeword `fm`.
pub fn dump_trajectory(
    ddpm: &DdpmChannel,
    cond: &Condition,
    samples: usize,
    every: usize,
    source: (f64, f64),
    seed: u64,
    dir: &RunDir,
) -> Result<()> {
    if every == 0 || samples == 0 {
        return Err(Error::InvalidArgument("samples and every must be positive".into()));
    }
    let n = ddpm.denoiser.block_len();
    let keep = |t: usize| t.is_multiple_of(every);

    let mut rng = make_rng_stream(seed, "trajectory.diffuse");
    let z = crate::diffusion::standard_normal(&[samples, n], &mut rng);
    let mut x = z.map(|v| source.0 + source.1 * v);
    let mut forward = vec![(0, x.clone())];
    for t in 1..=ddpm.schedule.steps() {
        x = diffuse_step(&x, t, &ddpm.schedule, &mut rng)?;
        if keep(t) {
            forward.push((t, x.clone()));
        }
    }
    dir.write("diffuse.csv", trajectory_csv(&forward))?;

    let fm = Tensor::from_rows(&vec![cond.fm.data().to_vec(); samples])?;
    let states = ddpm.trajectory(&fm, &vec![cond.m; samples], &mut make_rng_stream(seed, "trajectory.denoise"))?;
    let kept: Vec<(usize, Tensor)> = states.into_iter().filter(|(t, _)| keep(*t)).collect();
    dir.write("denoise.csv", trajectory_csv(&kept))?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "e2ediff", version, about = "Diffusion channel surrogates for end-to-end learned coding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Alternately train a codec and its surrogate.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// SER sweep of a trained codec on the real channel.
    EvalSer {
        #[arg(long)]
        config: PathBuf,
        /// Codec checkpoint.
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed noise level at every point instead of the Eb/N0 mapping.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Compare a trained surrogate with the real channel.
    GenFidelity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        surrogate: PathBuf,
        /// Codec whose codewords are the channel inputs; 16-QAM if omitted.
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a complete reproduction experiment.
    Recipe {
        /// fig2_awgn_qam16, fig3_awgn_e2e or fig4_rayleigh_e2e.
        #[arg(value_parser = parse_arg::<Recipe>)]
        name: Recipe,
        #[arg(long)]
        out: PathBuf,
        /// paper or desk.
        #[arg(long, default_value = "paper", value_parser = parse_arg::<Scale>)]
        scale: Scale,
        /// Overrides on top of the recipe defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Diffusion and denoising snapshots from a trained DDPM surrogate.
    DumpTrajectory {
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        message: usize,
        /// Codec providing the codeword; 16-QAM if omitted.
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        every: usize,
        #[arg(long, default_value_t = -1.32, allow_hyphen_values = true)]
        source_mean: f64,
        #[arg(long, default_value_t = 0.28)]
        source_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_arg<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn codebook_for(codec: Option<&PathBuf>, messages: usize, block_len: usize) -> Result<Tensor> {
    match codec {
        Some(path) => CodecPair::load(path)?.codebook(),
        None if messages == 16 && block_len == 2 => Ok(qam16_constellation()),
        None => Err(Error::InvalidArgument(
            "a codec checkpoint is required unless the surrogate is for 16-QAM".into(),
        )),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => {
            let (cfg, source) = load_config(&config, None)?;
            let dir = RunDir::create(out)?;
            dir.write_config(&cfg, source)?;
            run_train(&cfg, &dir)?;
            dir.write_manifest()
        }
        Command::EvalSer {
            config,
            codec,
            out,
            sigma,
        } => {
            let (mut cfg, source) = load_config(&config, Some(&ExperimentConfig::default()))?;
            if sigma.is_some() {
                cfg.eval.sigma_override = sigma;
                cfg.validate()?;
            }
            let codec = CodecPair::load(&codec)?;
            let dir = RunDir::create(out)?;
            dir.write_config(&cfg, source)?;
            run_eval_ser(&cfg, &codec)?.write_csv(dir.path("ser.csv"))?;
            dir.write_manifest()
        }
        Command::GenFidelity {
            config,
            surrogate,
            codec,
            out,
        } => {
            let (cfg, source) = load_config(&config, Some(&ExperimentConfig::default()))?;
            let surrogate = Surrogate::load(&surrogate)?;
            let book = codebook_for(codec.as_ref(), cfg.run.messages, cfg.run.block_len)?;
            let dir = RunDir::create(out)?;
            dir.write_config(&cfg, source)?;
            let report = run_fidelity(&cfg, &surrogate, &book, &dir)?;
            println!("max_ks {:.6}", report.max_ks());
            dir.write_manifest()
        }
        Command::Recipe {
            name: recipe,
            out,
            scale,
            config,
        } => {
            let base = recipe.config(scale);
            let (cfg, source) = match config {
                Some(path) => load_config(path, Some(&base))?,
                None => {
                    let mut cfg = base;
                    let env = std::env::var(SEED_ENV).ok();
                    let source = apply_seed_env(&mut cfg, env.as_deref())?;
                    (cfg, source)
                }
            };
            run_recipe(recipe, &cfg, source, &RunDir::create(out)?)
        }
        Command::DumpTrajectory {
            surrogate,
            out,
            message,
            codec,
            samples,
            every,
            source_mean,
            source_std,
            seed,
        } => {
            let ddpm = match Surrogate::load(&surrogate)? {
                Surrogate::Ddpm(d) => d,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "trajectories need a ddpm surrogate, got {}",
                        other.kind()
                    )))
                }
            };
            let book = codebook_for(codec.as_ref(), ddpm.denoiser.messages(), ddpm.denoiser.block_len())?;
            if message >= book.rows() {
                return Err(Error::InvalidArgument(format!("message {message} out of range")));
            }
            let fm = Tensor::new(vec![book.cols()], book.row(message).to_vec())?;
            let dir = RunDir::create(out)?;
            dump_trajectory(
                &ddpm,
                &Condition::new(message, fm),
                samples,
                every,
                (source_mean, source_std),
                seed,
                &dir,
            )?;
            dir.write_manifest()
        }
    }
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            exit_code(&e)
        }
    }
}
