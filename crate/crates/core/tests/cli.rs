use std::fs;
use std::path::Path;
use std::process::Command;

const TINY_TRAIN: &str = "\
messages=4
block_len=2
channel=awgn
train_ebn0_db=6
surrogate=model_aware
dataset_size=400
batch_size=100
schedule.early_phases=1
schedule.early_gen_epochs=1
schedule.early_ae_epochs=40
schedule.late_phases=1
schedule.late_gen_epochs=1
schedule.late_ae_epochs=40
ae.lr_initial=0.01
ae.lr_final=0.01
eval.ebn0_db=0,6
eval.min_symbols=10000
eval.min_errors=10
eval.max_symbols=20000
";

const TINY_RECIPE: &str = "\
dataset_size=600
batch_size=100
diffusion.T=5
diffusion.hidden=16
wgan.hidden=16
schedule.early_phases=1
schedule.early_gen_epochs=2
schedule.early_ae_epochs=1
schedule.late_phases=1
schedule.late_gen_epochs=1
schedule.late_ae_epochs=1
eval.ebn0_db=4
eval.min_symbols=10000
eval.min_errors=10
eval.max_symbols=20000
";

fn e2ediff(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_e2ediff"))
        .args(args)
        .env_remove("E2EDIFF_SEED")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(e2ediff(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(e2ediff(&["recipe", "fig9", "--out", "/tmp/x"]).status.code(), Some(2));
}

#[test]
fn corrupt_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "messages=16\nthis line is junk\n").unwrap();
    let out = e2ediff(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn missing_checkpoint_is_a_checkpoint_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    let out = e2ediff(&[
        "eval-ser",
        "--config",
        s(&cfg),
        "--codec",
        s(&tmp.path().join("nope.ckpt")),
        "--out",
        s(&tmp.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn noiseless_evaluation_of_a_trained_codec_is_error_free() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, TINY_TRAIN).unwrap();
    let run = tmp.path().join("run");
    let out = e2ediff(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["codec.ckpt", "surrogate.ckpt", "losses.csv", "drift.csv", "config.txt", "seed.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let out = e2ediff(&[
        "eval-ser",
        "--config",
        s(&cfg),
        "--codec",
        s(&run.join("codec.ckpt")),
        "--out",
        s(&tmp.path().join("eval")),
        "--sigma",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("eval/ser.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<_> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "num_errors").unwrap();
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row.split(',').nth(col).unwrap(), "0", "{row}");
    }
}

fn csv_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            csv_files(&p, out);
        } else if p.extension().is_some_and(|x| x == "csv" || x == "ckpt") {
            out.push(p);
        }
    }
}

#[test]
fn recipe_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("override.txt");
    fs::write(&cfg, TINY_RECIPE).unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = tmp.path().join(name);
            let out = e2ediff(&["recipe", "fig3_awgn_e2e", "--scale", "desk", "--config", s(&cfg), "--out", s(&dir)]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            dir
        })
        .collect();
    let mut files = Vec::new();
    csv_files(&runs[0], &mut files);
    assert!(files.iter().any(|f| f.ends_with("ddpm/ser.csv")));
    assert!(files.iter().any(|f| f.ends_with("wgan/ser.csv")));
    for f in files {
        let rel = f.strip_prefix(&runs[0]).unwrap();
        assert_eq!(fs::read(&f).unwrap(), fs::read(runs[1].join(rel)).unwrap(), "{}", rel.display());
    }
}
