//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything;
//! `-- 1 4` runs a subset.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use e2ediff::autoencoder::ModelAwareChannel;
use e2ediff::channels::{ebn0_to_sigma, qam16_constellation, EbN0Spec};
use e2ediff::eval::{channel_fidelity_report, FidelityReport, SerRow, SerTable};
use e2ediff::harness::{run_eval_ser, run_recipe, ExperimentConfig, Recipe, RunDir, Scale, SeedSource};
use e2ediff::rng::make_rng_stream;
use e2ediff::trainer::{alternate_train, init_surrogate, train_surrogate_on_constellation, SurrogateKind};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn budget(pass: bool, elapsed: Duration, limit_secs: u64) -> bool {
    pass && elapsed.as_secs() < limit_secs
}

fn gradients() -> Outcome {
    let checks = common::gradient_battery();
    let worst = checks.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).unwrap();
    let pass = checks.iter().all(|c| c.max_rel < 1e-4);
    Outcome::new(pass, format!("{} paths, worst {:.2e} ({})", checks.len(), worst.max_rel, worst.name))
}

fn diffusion_identities() -> Outcome {
    let moments = common::moment_agreement(&[1, 50, 100], 100_000);
    let worst_z = moments.iter().map(|m| m.1).fold(0.0, f64::max);
    let gap = common::noise_mean_identity(1000);
    let zs = moments.iter().map(|(t, z)| format!("t={t}:{z:.2}")).collect::<Vec<_>>().join(" ");
    Outcome::new(worst_z < 3.0 && gap < 1e-10, format!("moment z {zs}; mean identity gap {gap:.1e}"))
}

fn fig2_config() -> ExperimentConfig {
    Recipe::Fig2AwgnQam16.config(Scale::Paper)
}

fn fidelity(cfg: &ExperimentConfig, surrogate: &e2ediff::trainer::Surrogate) -> FidelityReport {
    let truth = ModelAwareChannel::new(cfg.run.channel, cfg.run.train_sigma().unwrap());
    channel_fidelity_report(&truth, surrogate, &qam16_constellation(), 10_000, cfg.run.seed).unwrap()
}

fn ks_line(report: &FidelityReport) -> String {
    report.per_message.iter().map(|m| format!("{:.3}", m.ks)).collect::<Vec<_>>().join(" ")
}

fn generation_fidelity() -> Outcome {
    let cfg = fig2_config();
    let (surrogate, report) = train_surrogate_on_constellation(&cfg.run, &qam16_constellation()).unwrap();
    let last_loss = report.phases.last().and_then(|p| p.gen_losses.last()).copied().unwrap_or(f64::NAN);
    let fid = fidelity(&cfg, &surrogate);
    let max = fid.max_ks();
    Outcome::new(
        max < 0.05,
        format!("max KS {max:.4} (< 0.05), final loss {last_loss:.4}; per message [{}]", ks_line(&fid)),
    )
}

fn negative_control() -> Outcome {
    let cfg = fig2_config();
    let surrogate = init_surrogate(&cfg.run, &mut make_rng_stream(cfg.run.seed, "init.surrogate")).unwrap();
    let max = fidelity(&cfg, &surrogate).max_ks();
    Outcome::new(max > 0.2, format!("untrained max KS {max:.4} (> 0.2)"))
}

fn train_and_sweep(cfg: &ExperimentConfig, kind: SurrogateKind) -> SerTable {
    let mut c = cfg.clone();
    c.run.surrogate = kind;
    let (codec, _, _) = alternate_train(&c.run).unwrap();
    run_eval_ser(&c, &codec).unwrap()
}

fn ser_line(t: &SerTable) -> String {
    t.rows.iter().map(|r| format!("{}:{:.2e}", r.ebn0_db, r.ser)).collect::<Vec<_>>().join(" ")
}

fn within_factor(a: &SerRow, b: &SerRow, k: f64) -> bool {
    a.ser <= k * b.ser && b.ser <= k * a.ser
}

fn awgn_e2e() -> Outcome {
    let cfg = Recipe::Fig3AwgnE2e.config(Scale::Desk);
    let ma = train_and_sweep(&cfg, SurrogateKind::ModelAware);
    let ddpm = train_and_sweep(&cfg, SurrogateKind::Ddpm);
    let wgan = train_and_sweep(&cfg, SurrogateKind::Wgan);
    let decreasing = ma.rows.windows(2).all(|w| w[1].ser < w[0].ser);
    let ddpm_close = ddpm.rows.iter().zip(&ma.rows).all(|(d, m)| within_factor(d, m, 2.0));
    let wgan_close = within_factor(wgan.row(5.0).unwrap(), ma.row(5.0).unwrap(), 2.0);
    Outcome::new(
        decreasing && ddpm_close && wgan_close,
        format!(
            "(a) {decreasing} (b) {ddpm_close} (c) {wgan_close}\n    model_aware {}\n    ddpm        {}\n    wgan        {}",
            ser_line(&ma),
            ser_line(&ddpm),
            ser_line(&wgan)
        ),
    )
}

fn rayleigh_e2e() -> Outcome {
    let cfg = Recipe::Fig4RayleighE2e.config(Scale::Desk);
    let ma = train_and_sweep(&cfg, SurrogateKind::ModelAware);
    let ddpm = train_and_sweep(&cfg, SurrogateKind::Ddpm);
    let wgan = train_and_sweep(&cfg, SurrogateKind::Wgan);
    // Nonincreasing up to the 3-sigma Monte-Carlo error of both points.
    let nonincreasing = ddpm
        .rows
        .windows(2)
        .all(|w| w[1].ser <= w[0].ser + 3.0 * (w[0].stderr + w[1].stderr));
    let tail_close = ddpm
        .rows
        .iter()
        .zip(&ma.rows)
        .filter(|(d, _)| d.ebn0_db >= 20.0)
        .all(|(d, m)| within_factor(d, m, 3.0));
    Outcome::new(
        nonincreasing && tail_close,
        format!(
            "nonincreasing {nonincreasing}, 20-25 dB within 3x {tail_close}\n    model_aware {}\n    ddpm        {}\n    wgan (observed only) {}",
            ser_line(&ma),
            ser_line(&ddpm),
            ser_line(&wgan)
        ),
    )
}

fn csv_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            csv_files(root, &p, out);
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

fn determinism() -> Outcome {
    let mut cfg = Recipe::Fig3AwgnE2e.config(Scale::Desk);
    cfg.run.dataset_size = 1200;
    cfg.run.batch_size = 200;
    cfg.run.diffusion.steps = 10;
    cfg.run.schedule.early.phases = 2;
    cfg.run.schedule.early.gen_epochs = 2;
    cfg.run.schedule.early.ae_epochs = 1;
    cfg.run.schedule.late.phases = 1;
    cfg.run.schedule.late.gen_epochs = 2;
    cfg.run.schedule.late.ae_epochs = 2;
    cfg.eval.ebn0_db = vec![3.0, 6.0];
    cfg.eval.min_symbols = 10_000;
    cfg.eval.max_symbols = 50_000;
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = RunDir::create(tmp.path().join(name)).unwrap();
            run_recipe(Recipe::Fig3AwgnE2e, &cfg, SeedSource::Config, &dir).unwrap();
            dir.root().to_path_buf()
        })
        .collect();
    let mut files = Vec::new();
    csv_files(&dirs[0], &dirs[0], &mut files);
    let differing: Vec<_> = files
        .iter()
        .filter(|rel| fs::read(dirs[0].join(rel)).ok() != fs::read(dirs[1].join(rel)).ok())
        .map(|rel| rel.display().to_string())
        .collect();
    Outcome::new(
        differing.is_empty() && files.len() >= 9,
        format!("{} CSVs compared, differing: {differing:?}", files.len()),
    )
}

fn ser_oracle() -> Outcome {
    let sigmas: Vec<f64> = [4.0, 5.0, 8.0]
        .iter()
        .map(|&db| ebn0_to_sigma(EbN0Spec::for_code(db, 16, 2).unwrap()))
        .collect();
    let rows = common::ser_oracle_agreement(&sigmas, 1_000_000);
    let pass = rows.iter().all(|r| r.z < 3.0);
    let detail = rows
        .iter()
        .map(|r| format!("σ={:.4}: {:.5} vs {:.5} (z {:.2})", r.sigma, r.simulated, r.closed_form, r.z))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(pass, detail)
}

type Criterion = (u8, &'static str, u64, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    (1, "autodiff soundness", 60, gradients),
    (2, "diffusion identities", 120, diffusion_identities),
    (3, "channel generation fidelity", 30 * 60, generation_fidelity),
    (4, "AWGN end-to-end", 60 * 60, awgn_e2e),
    (5, "Rayleigh end-to-end", 90 * 60, rayleigh_e2e),
    (6, "negative control", 30 * 60, negative_control),
    (7, "determinism", 5 * 60, determinism),
    (8, "channel simulator", 60, ser_oracle),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<u8> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let pass = budget(outcome.pass, elapsed, limit);
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {id} ({name}) [{:.1}s, budget {limit}s]: {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            outcome.detail
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
