//! Canned configurations for the three reproduction experiments.

use std::fmt;
use std::str::FromStr;

use super::config::{EvalConfig, ExperimentConfig};
use crate::channels::{ChannelModel, RayleighParams};
use crate::trainer::{AlternationSchedule, LrRange, PhaseSpec, RunConfig, SurrogateKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    /// Conditional DDPM fitted to 16-QAM over AWGN at 5 dB; fidelity only.
    Fig2AwgnQam16,
    /// `(n, M) = (7, 16)` codec over AWGN, trained at 5 dB.
    Fig3AwgnE2e,
    /// The same codec over real Rayleigh fading, trained at 12 dB.
    Fig4RayleighE2e,
}

/// Full-size settings, or a reduced variant that runs in minutes on one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scale {
    #[default]
    Paper,
    Desk,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::InvalidArgument(format!("unknown scale `{other}` (paper or desk)"))),
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown recipe `{s}` (expected one of {})",
                    Recipe::ALL.map(Recipe::name).join(", ")
                ))
            })
    }
}

impl Recipe {
    pub const ALL: [Recipe; 3] = [Recipe::Fig2AwgnQam16, Recipe::Fig3AwgnE2e, Recipe::Fig4RayleighE2e];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Fig2AwgnQam16 => "fig2_awgn_qam16",
            Recipe::Fig3AwgnE2e => "fig3_awgn_e2e",
            Recipe::Fig4RayleighE2e => "fig4_rayleigh_e2e",
        }
    }

    pub fn config(self, scale: Scale) -> ExperimentConfig {
        let cfg = match self {
            Recipe::Fig2AwgnQam16 => fig2(),
            Recipe::Fig3AwgnE2e => fig3(),
            Recipe::Fig4RayleighE2e => fig4(),
        };
        match scale {
            Scale::Paper => cfg,
            Scale::Desk => desk(self, cfg),
        }
    }
}

fn fig2() -> ExperimentConfig {
    let mut run = RunConfig {
        messages: 16,
        block_len: 2,
        channel: ChannelModel::Awgn,
        train_ebn0_db: 5.0,
        surrogate: SurrogateKind::Ddpm,
        dataset_size: 100_000,
        batch_size: 3000,
        ..RunConfig::default()
    };
    run.diffusion.steps = 100;
    run.diffusion.beta = vec![0.05];
    run.diffusion.hidden = 64;
    run.diffusion.hidden_layers = 3;
    run.diffusion.lr = LrRange::new(1e-3, 1e-4);
    // The constellation is fixed, so phases only refresh the channel samples.
    run.schedule = AlternationSchedule {
        early: PhaseSpec {
            phases: 5,
            gen_epochs: 40,
            ae_epochs: 0,
        },
        late: PhaseSpec {
            phases: 5,
            gen_epochs: 20,
            ae_epochs: 0,
        },
        ..AlternationSchedule::default()
    };
    ExperimentConfig {
        run,
        eval: EvalConfig {
            ebn0_db: vec![5.0],
            samples_per_message: 10_000,
            surrogates: vec![SurrogateKind::Ddpm],
            ..EvalConfig::default()
        },
    }
}

fn fig3() -> ExperimentConfig {
    let mut run = RunConfig {
        messages: 16,
        block_len: 7,
        channel: ChannelModel::Awgn,
        train_ebn0_db: 5.0,
        dataset_size: 100_000,
        batch_size: 3000,
        codec_hidden: vec![16, 16],
        ae_lr: LrRange::constant(1e-3),
        ..RunConfig::default()
    };
    run.diffusion.steps = 50;
    run.diffusion.beta = vec![0.05];
    run.diffusion.lr = LrRange::new(1e-3, 1e-5);
    run.wgan.hidden = 128;
    run.wgan.lr = LrRange::constant(1e-4);
    ExperimentConfig {
        run,
        eval: EvalConfig {
            ebn0_db: (2..=8).map(f64::from).collect(),
            ..EvalConfig::default()
        },
    }
}

fn fig4() -> ExperimentConfig {
    let mut cfg = fig3();
    cfg.run.channel = ChannelModel::Rayleigh(RayleighParams::new(1.0).expect("unit scale"));
    cfg.run.train_ebn0_db = 12.0;
    cfg.run.wgan.hidden = 256;
    cfg.run.wgan.lr = LrRange::constant(5e-5);
    cfg.eval.ebn0_db = (1..=25).map(f64::from).collect();
    cfg
}

/// Same architectures and rates; less data and a schedule sized for one core.
fn desk(recipe: Recipe, mut cfg: ExperimentConfig) -> ExperimentConfig {
    let r = &mut cfg.run;
    match recipe {
        Recipe::Fig2AwgnQam16 => {
            r.dataset_size = 20_000;
            r.batch_size = 500;
            r.schedule.early.gen_epochs = 10;
            r.schedule.late.gen_epochs = 5;
            cfg.eval.samples_per_message = 2000;
        }
        Recipe::Fig3AwgnE2e | Recipe::Fig4RayleighE2e => {
            // Generator epochs are cheap next to codec epochs through the
            // reverse chain, so the surrogate is refreshed often.
            r.dataset_size = 12_000;
            r.batch_size = 300;
            r.schedule = AlternationSchedule {
                early: PhaseSpec {
                    phases: 5,
                    gen_epochs: 100,
                    ae_epochs: 3,
                },
                late: PhaseSpec {
                    phases: 10,
                    gen_epochs: 100,
                    ae_epochs: 10,
                },
                ..AlternationSchedule::default()
            };
            cfg.eval.min_symbols = 20_000;
            cfg.eval.max_symbols = 1_000_000;
        }
    }
    cfg
}
