//! Run directories: every artifact of a run plus a hash manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, SeedSource};
use crate::Result;

pub const CONFIG_FILE: &str = "config.txt";
pub const SEED_FILE: &str = "seed.txt";
pub const MANIFEST_FILE: &str = "manifest.sha256";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// A nested run directory, e.g. one per surrogate.
    pub fn child(&self, name: &str) -> Result<Self> {
        Self::create(self.root.join(name))
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        Ok(path)
    }

    /// Config snapshot and seed record.
    pub fn write_config(&self, cfg: &ExperimentConfig, source: SeedSource) -> Result<()> {
        self.write(CONFIG_FILE, cfg.to_text())?;
        self.write(SEED_FILE, format!("seed={}\nsource={source}\n", cfg.run.seed))?;
        Ok(())
    }

    /// Files under the run directory, relative and sorted, excluding the
    /// manifest itself.
    pub fn files(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        collect(&self.root, &self.root, &mut out)?;
        out.retain(|f| f != MANIFEST_FILE);
        out.sort();
        Ok(out)
    }

    /// Writes `sha256  path` for every file.
    pub fn write_manifest(&self) -> Result<()> {
        let mut text = String::new();
        for rel in self.files()? {
            let digest = Sha256::digest(fs::read(self.path(&rel))?);
            text.push_str(&format!("{}  {rel}\n", hex::encode(digest)));
        }
        self.write(MANIFEST_FILE, text)?;
        Ok(())
    }

    /// Files whose current hash differs from the manifest (or that vanished).
    pub fn verify_manifest(&self) -> Result<Vec<String>> {
        let text = fs::read_to_string(self.path(MANIFEST_FILE))?;
        let mut bad = Vec::new();
        for line in text.lines() {
            let Some((hash, rel)) = line.split_once("  ") else {
                bad.push(line.to_string());
                continue;
            };
            match fs::read(self.path(rel)) {
                Ok(bytes) if hex::encode(Sha256::digest(&bytes)) == hash => {}
                _ => bad.push(rel.to_string()),
            }
        }
        Ok(bad)
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Plot script for SER curves, one `ser.csv` per surrogate subdirectory.
pub fn ser_plot_script(surrogates: &[String], title: &str) -> String {
    let names = surrogates
        .iter()
        .map(|s| format!("\"{s}\""))
        .collect::<Vec<_>>()
        .join(", ");
    format!(
        r#"# Plots SER against Eb/N0 for each surrogate; run from the run directory.
import csv
import matplotlib.pyplot as plt

for name in [{names}]:
    with open(f"{{name}}/ser.csv") as f:
        rows = list(csv.DictReader(f))
    x = [float(r["ebn0_db"]) for r in rows]
    y = [float(r["ser"]) for r in rows]
    e = [3 * float(r["stderr"]) for r in rows]
    plt.errorbar(x, y, yerr=e, marker="o", label=name)
plt.yscale("log")
plt.xlabel("Eb/N0 [dB]")
plt.ylabel("SER")
plt.title("{title}")
plt.grid(True, which="both")
plt.legend()
plt.savefig("ser.png", dpi=150)
"#
    )
}

/// Plot script for constellations and the output-norm histogram/ECDF of
/// one message, true vs generated.
pub fn fidelity_plot_script(message: usize) -> String {
    format!(
        r#"# Constellations and output-norm distributions, true vs generated.
import csv
import matplotlib.pyplot as plt

def load(path):
    with open(path) as f:
        return list(csv.DictReader(f))

fig, ax = plt.subplots(1, 4, figsize=(18, 4))
for a, path, title in [(ax[0], "constellation_true.csv", "true"), (ax[1], "constellation.csv", "generated")]:
    rows = load(path)
    a.scatter([float(r["dim0"]) for r in rows], [float(r["dim1"]) for r in rows],
              c=[int(r["message"]) for r in rows], s=4, cmap="tab20")
    a.set_title(title)
    a.set_aspect("equal")
m = "{message}"
true = sorted(float(r["norm"]) for r in load("norms_true.csv") if r["message"] == m)
gen = sorted(float(r["norm"]) for r in load("norms.csv") if r["message"] == m)
ax[2].hist([true, gen], bins=50, label=["true", "generated"])
ax[2].legend()
for xs, label in [(true, "true"), (gen, "generated")]:
    ax[3].plot(xs, [(i + 1) / len(xs) for i in range(len(xs))], label=label)
ax[3].legend()
ax[2].set_title(f"norm histogram, m={{m}}")
ax[3].set_title(f"norm ECDF, m={{m}}")
plt.savefig("fidelity.png", dpi=150)
"#
    )
}
