//! Flat `key=value` experiment configs.
//!
//! Keys carry their section as a prefix (`diffusion.T=50`). Blank lines and
//! lines starting with `#` are ignored; unknown and repeated keys are
//! errors. Serialization writes every key in a fixed order, and floats use
//! the shortest representation that parses back to the same bits.

use std::collections::BTreeSet;
use std::fmt::{Display, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::channels::{ChannelModel, RayleighParams};
use crate::trainer::{RunConfig, SurrogateKind};
use crate::{Error, Result};

/// Environment variable that overrides the master seed.
pub const SEED_ENV: &str = "E2EDIFF_SEED";

/// Keys a standalone config (outside a recipe) must set.
pub const REQUIRED_KEYS: [&str; 5] = ["messages", "block_len", "channel", "train_ebn0_db", "surrogate"];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ebn0_db: Vec<f64>,
    pub min_symbols: u64,
    pub min_errors: u64,
    pub max_symbols: u64,
    pub samples_per_message: usize,
    /// Replaces the Eb/N0-derived noise level at every sweep point.
    pub sigma_override: Option<f64>,
    /// Surrogates trained and compared by the end-to-end recipes.
    pub surrogates: Vec<SurrogateKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ebn0_db: (2..=8).map(f64::from).collect(),
            min_symbols: 100_000,
            min_errors: 100,
            max_symbols: 10_000_000,
            samples_per_message: 10_000,
            sigma_override: None,
            surrogates: vec![SurrogateKind::ModelAware, SurrogateKind::Ddpm, SurrogateKind::Wgan],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub eval: EvalConfig,
}

fn list<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_one<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_one(v.trim())).collect()
}

impl ExperimentConfig {
    /// Every key with its current value, in serialization order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let r = &self.run;
        let e = &self.eval;
        let (channel, sigma_r) = match r.channel {
            ChannelModel::Awgn => ("awgn", 1.0),
            ChannelModel::Rayleigh(p) => ("rayleigh", p.sigma_r()),
        };
        let s = &r.schedule;
        vec![
            ("seed", r.seed.to_string()),
            ("messages", r.messages.to_string()),
            ("block_len", r.block_len.to_string()),
            ("channel", channel.into()),
            ("channel.sigma_r", sigma_r.to_string()),
            ("train_ebn0_db", r.train_ebn0_db.to_string()),
            ("surrogate", r.surrogate.to_string()),
            ("dataset_size", r.dataset_size.to_string()),
            ("batch_size", r.batch_size.to_string()),
            ("codec.hidden", list(&r.codec_hidden)),
            ("codec.power_norm", r.power_norm.to_string()),
            ("ae.lr_initial", r.ae_lr.initial.to_string()),
            ("ae.lr_final", r.ae_lr.last.to_string()),
            ("diffusion.T", r.diffusion.steps.to_string()),
            ("diffusion.beta_t", list(&r.diffusion.beta)),
            ("diffusion.reverse_noise", r.diffusion.reverse_noise.to_string()),
            ("diffusion.hidden", r.diffusion.hidden.to_string()),
            ("diffusion.hidden_layers", r.diffusion.hidden_layers.to_string()),
            ("diffusion.lr_initial", r.diffusion.lr.initial.to_string()),
            ("diffusion.lr_final", r.diffusion.lr.last.to_string()),
            ("wgan.hidden", r.wgan.hidden.to_string()),
            ("wgan.clip_c", r.wgan.clip_c.to_string()),
            ("wgan.n_critic", r.wgan.n_critic.to_string()),
            ("wgan.lr_initial", r.wgan.lr.initial.to_string()),
            ("wgan.lr_final", r.wgan.lr.last.to_string()),
            ("schedule.early_phases", s.early.phases.to_string()),
            ("schedule.early_gen_epochs", s.early.gen_epochs.to_string()),
            ("schedule.early_ae_epochs", s.early.ae_epochs.to_string()),
            ("schedule.late_phases", s.late.phases.to_string()),
            ("schedule.late_gen_epochs", s.late.gen_epochs.to_string()),
            ("schedule.late_ae_epochs", s.late.ae_epochs.to_string()),
            ("schedule.drift_threshold", s.drift_threshold.to_string()),
            ("schedule.drift_patience", s.drift_patience.to_string()),
            ("eval.ebn0_db", list(&e.ebn0_db)),
            ("eval.min_symbols", e.min_symbols.to_string()),
            ("eval.min_errors", e.min_errors.to_string()),
            ("eval.max_symbols", e.max_symbols.to_string()),
            ("eval.samples_per_message", e.samples_per_message.to_string()),
            (
                "eval.sigma_override",
                e.sigma_override.map_or_else(|| "none".into(), |v| v.to_string()),
            ),
            ("eval.surrogates", list(&e.surrogates)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// Sets one key. `sigma_r` collects `channel.sigma_r`, which only takes
    /// effect once the channel kind is known.
    fn set(&mut self, key: &str, value: &str, sigma_r: &mut f64) -> std::result::Result<(), String> {
        let r = &mut self.run;
        let e = &mut self.eval;
        match key {
            "seed" => r.seed = parse_one(value)?,
            "messages" => r.messages = parse_one(value)?,
            "block_len" => r.block_len = parse_one(value)?,
            "channel" => {
                r.channel = match value {
                    "awgn" => ChannelModel::Awgn,
                    "rayleigh" => ChannelModel::Rayleigh(RayleighParams::new(1.0).expect("unit scale")),
                    other => return Err(format!("unknown channel `{other}` (expected awgn or rayleigh)")),
                }
            }
            "channel.sigma_r" => *sigma_r = parse_one(value)?,
            "train_ebn0_db" => r.train_ebn0_db = parse_one(value)?,
            "surrogate" => r.surrogate = parse_one(value)?,
            "dataset_size" => r.dataset_size = parse_one(value)?,
            "batch_size" => r.batch_size = parse_one(value)?,
            "codec.hidden" => r.codec_hidden = parse_list(value)?,
            "codec.power_norm" => r.power_norm = parse_one(value)?,
            "ae.lr_initial" => r.ae_lr.initial = parse_one(value)?,
            "ae.lr_final" => r.ae_lr.last = parse_one(value)?,
            "diffusion.T" | "T" => r.diffusion.steps = parse_one(value)?,
            "diffusion.beta_t" | "beta_t" => {
                r.diffusion.beta = parse_list(value)?;
                if r.diffusion.beta.is_empty() {
                    return Err("at least one beta is required".into());
                }
            }
            "diffusion.reverse_noise" => r.diffusion.reverse_noise = parse_one(value)?,
            "diffusion.hidden" => r.diffusion.hidden = parse_one(value)?,
            "diffusion.hidden_layers" => r.diffusion.hidden_layers = parse_one(value)?,
            "diffusion.lr_initial" => r.diffusion.lr.initial = parse_one(value)?,
            "diffusion.lr_final" => r.diffusion.lr.last = parse_one(value)?,
            "wgan.hidden" => r.wgan.hidden = parse_one(value)?,
            "wgan.clip_c" => r.wgan.clip_c = parse_one(value)?,
            "wgan.n_critic" => r.wgan.n_critic = parse_one(value)?,
            "wgan.lr_initial" => r.wgan.lr.initial = parse_one(value)?,
            "wgan.lr_final" => r.wgan.lr.last = parse_one(value)?,
            "schedule.early_phases" => r.schedule.early.phases = parse_one(value)?,
            "schedule.early_gen_epochs" => r.schedule.early.gen_epochs = parse_one(value)?,
            "schedule.early_ae_epochs" => r.schedule.early.ae_epochs = parse_one(value)?,
            "schedule.late_phases" => r.schedule.late.phases = parse_one(value)?,
            "schedule.late_gen_epochs" => r.schedule.late.gen_epochs = parse_one(value)?,
            "schedule.late_ae_epochs" => r.schedule.late.ae_epochs = parse_one(value)?,
            "schedule.drift_threshold" => r.schedule.drift_threshold = parse_one(value)?,
            "schedule.drift_patience" => r.schedule.drift_patience = parse_one(value)?,
            "eval.ebn0_db" => e.ebn0_db = parse_list(value)?,
            "eval.min_symbols" => e.min_symbols = parse_one(value)?,
            "eval.min_errors" => e.min_errors = parse_one(value)?,
            "eval.max_symbols" => e.max_symbols = parse_one(value)?,
            "eval.samples_per_message" => e.samples_per_message = parse_one(value)?,
            "eval.sigma_override" => {
                e.sigma_override = match value {
                    "none" | "" => None,
                    v => Some(parse_one(v)?),
                }
            }
            "eval.surrogates" => e.surrogates = parse_list(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `text` on top of `base`. With `require_core`, the keys in
    /// [`REQUIRED_KEYS`] must all appear.
    pub fn parse(text: &str, base: &ExperimentConfig, require_core: bool) -> Result<Self> {
        let mut cfg = base.clone();
        let mut sigma_r = match base.run.channel {
            ChannelModel::Awgn => 1.0,
            ChannelModel::Rayleigh(p) => p.sigma_r(),
        };
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::ConfigParse { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let canonical = match key {
                "T" => "diffusion.T",
                "beta_t" => "diffusion.beta_t",
                k => k,
            };
            cfg.set(key, value, &mut sigma_r).map_err(&err)?;
            if !seen.insert(canonical.to_string()) {
                return Err(err(format!("key `{canonical}` given twice")));
            }
        }
        if let ChannelModel::Rayleigh(_) = cfg.run.channel {
            cfg.run.channel = ChannelModel::Rayleigh(RayleighParams::new(sigma_r).map_err(|e| {
                Error::ConfigField {
                    field: "channel.sigma_r".into(),
                    msg: e.to_string(),
                }
            })?);
        }
        if require_core {
            let missing: Vec<&str> = REQUIRED_KEYS
                .iter()
                .copied()
                .filter(|k| !seen.contains(*k))
                .collect();
            if !missing.is_empty() {
                return Err(Error::ConfigField {
                    field: missing.join(", "),
                    msg: format!("required keys missing (required: {})", REQUIRED_KEYS.join(", ")),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        let e = &self.eval;
        let field = |f: &str, m: &str| Error::ConfigField {
            field: f.into(),
            msg: m.into(),
        };
        if e.ebn0_db.iter().any(|v| !v.is_finite()) {
            return Err(field("eval.ebn0_db", "values must be finite"));
        }
        if e.min_symbols < 10_000 {
            return Err(field("eval.min_symbols", "must be at least 10000"));
        }
        if e.max_symbols < e.min_symbols {
            return Err(field("eval.max_symbols", "must be at least eval.min_symbols"));
        }
        if e.samples_per_message < 1000 {
            return Err(field("eval.samples_per_message", "must be at least 1000"));
        }
        if let Some(s) = e.sigma_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(field("eval.sigma_override", "must be a non-negative number or none"));
            }
        }
        Ok(())
    }
}

/// Where the master seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Config,
    Environment,
}

impl Display for SeedSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SeedSource::Config => "config",
            SeedSource::Environment => SEED_ENV,
        })
    }
}

/// Applies `E2EDIFF_SEED` (when set) to `cfg`.
pub fn apply_seed_env(cfg: &mut ExperimentConfig, env: Option<&str>) -> Result<SeedSource> {
    match env {
        None => Ok(SeedSource::Config),
        Some(v) => {
            cfg.run.seed = v.trim().parse().map_err(|_| Error::ConfigField {
                field: SEED_ENV.into(),
                msg: format!("not an unsigned integer: `{v}`"),
            })?;
            Ok(SeedSource::Environment)
        }
    }
}

/// Reads a standalone config file. `base` supplies recipe defaults; without
/// one every key in [`REQUIRED_KEYS`] must be present.
pub fn load_config(path: impl AsRef<Path>, base: Option<&ExperimentConfig>) -> Result<(ExperimentConfig, SeedSource)> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::ConfigField {
        field: path.as_ref().display().to_string(),
        msg: format!("cannot read config: {e}"),
    })?;
    let default = ExperimentConfig::default();
    let mut cfg = ExperimentConfig::parse(&text, base.unwrap_or(&default), base.is_none())?;
    let env = std::env::var(SEED_ENV).ok();
    let source = apply_seed_env(&mut cfg, env.as_deref())?;
    Ok((cfg, source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn required() -> String {
        "messages=16\nblock_len=7\nchannel=awgn\ntrain_ebn0_db=5\nsurrogate=ddpm\n".into()
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.to_text(), &ExperimentConfig::default(), true).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_file_needs_recipe_context() {
        let base = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse("", &base, false).unwrap(), base);
        let err = ExperimentConfig::parse("", &base, true).unwrap_err().to_string();
        for k in REQUIRED_KEYS {
            assert!(err.contains(k), "{err}");
        }
    }

    #[test]
    fn beta_out_of_range_is_rejected() {
        for key in ["beta_t", "diffusion.beta_t"] {
            let text = format!("{}{key}=1.5\n", required());
            let err = ExperimentConfig::parse(&text, &ExperimentConfig::default(), true).unwrap_err();
            assert!(err.to_string().contains("beta must lie in (0,1)"), "{err}");
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = format!("{}# comment\n\nbogus.key=1\n", required());
        match ExperimentConfig::parse(&text, &ExperimentConfig::default(), true) {
            Err(Error::ConfigParse { line, msg }) => {
                assert_eq!(line, 8);
                assert!(msg.contains("unknown key"));
            }
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse("messages=x\n", &ExperimentConfig::default(), false) {
            Err(Error::ConfigParse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        match ExperimentConfig::parse("seed=1\nseed=2\n", &ExperimentConfig::default(), false) {
            Err(Error::ConfigParse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::parse("no equals sign\n", &ExperimentConfig::default(), false).is_err());
    }

    #[test]
    fn rayleigh_scale_applies_in_any_order() {
        let a = ExperimentConfig::parse("channel.sigma_r=2\nchannel=rayleigh\n", &ExperimentConfig::default(), false)
            .unwrap();
        assert_eq!(a.run.channel, ChannelModel::Rayleigh(RayleighParams::new(2.0).unwrap()));
        assert!(ExperimentConfig::parse("channel=rayleigh\nchannel.sigma_r=-1\n", &ExperimentConfig::default(), false)
            .is_err());
    }

    #[test]
    fn seed_env_override() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(apply_seed_env(&mut cfg, None).unwrap(), SeedSource::Config);
        assert_eq!(apply_seed_env(&mut cfg, Some("42")).unwrap(), SeedSource::Environment);
        assert_eq!(cfg.run.seed, 42);
        assert!(apply_seed_env(&mut cfg, Some("-3")).is_err());
    }

    #[test]
    fn sigma_override_parses() {
        let cfg = ExperimentConfig::parse("eval.sigma_override=0\n", &ExperimentConfig::default(), false).unwrap();
        assert_eq!(cfg.eval.sigma_override, Some(0.0));
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        let surrogate = prop_oneof![
            Just(SurrogateKind::ModelAware),
            Just(SurrogateKind::Ddpm),
            Just(SurrogateKind::Wgan)
        ];
        (
            (any::<u64>(), 2usize..64, 1usize..16, any::<bool>(), 0.1f64..4.0, -10.0f64..30.0, surrogate),
            (1usize..5000, prop::collection::vec(1usize..64, 0..3), 1e-6f64..1e-1, 1e-6f64..1e-1),
            (1usize..200, prop::collection::vec(1e-4f64..0.5, 1..2), 1usize..4, 0.0f64..1.0),
            (prop::collection::vec(-5.0f64..30.0, 0..6), prop::option::of(0.0f64..3.0)),
        )
            .prop_map(|(a, b, c, d)| {
                let mut cfg = ExperimentConfig::default();
                let r = &mut cfg.run;
                (r.seed, r.messages, r.block_len) = (a.0, a.1, a.2);
                r.channel = if a.3 {
                    ChannelModel::Rayleigh(RayleighParams::new(a.4).unwrap())
                } else {
                    ChannelModel::Awgn
                };
                r.train_ebn0_db = a.5;
                r.surrogate = a.6;
                r.batch_size = b.0;
                r.dataset_size = b.0 * 3;
                r.codec_hidden = b.1;
                r.ae_lr.initial = b.2;
                r.ae_lr.last = b.3;
                r.diffusion.steps = c.0;
                r.diffusion.beta = c.1;
                r.diffusion.hidden_layers = c.2;
                r.schedule.drift_threshold = c.3;
                cfg.eval.ebn0_db = d.0;
                cfg.eval.sigma_override = d.1;
                cfg
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(cfg in arb_config()) {
            let text = cfg.to_text();
            let back = ExperimentConfig::parse(&text, &ExperimentConfig::default(), true).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
