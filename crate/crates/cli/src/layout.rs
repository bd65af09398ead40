//! On-disk layout of a run: `<out>/<run-id>/<stage>/...`, one checksum
//! manifest per stage.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Stage {
    Synth,
    Superpixels,
    Cluster,
    Candidates,
    Select,
    Serve,
    TrainRl,
    Predict,
    Evaluate,
    Report,
    /// Every stage from superpixels to report, with headless selection.
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Superpixels => "superpixels",
            Stage::Cluster => "cluster",
            Stage::Candidates => "candidates",
            Stage::Select | Stage::Serve => "selections",
            Stage::TrainRl => "train-rl",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub files: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(out_dir: &Path, run_id: &str) -> Self {
        Self { root: out_dir.join(run_id) }
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    /// Fresh (emptied) output directory for `stage`.
    pub fn prepare(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.dir(stage);
        if dir.exists() && stage != Stage::Select && stage != Stage::Serve {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Fail unless `producer` has completed (its manifest exists).
    pub fn require(&self, producer: Stage) -> Result<PathBuf> {
        let dir = self.dir(producer);
        let manifest = dir.join(MANIFEST);
        if !manifest.is_file() {
            anyhow::bail!(
                "missing {}; it is produced by the `{}` stage, run that first",
                manifest.display(),
                stage_command(producer)
            );
        }
        Ok(dir)
    }

    /// Path of a file written by `producer`, which must exist.
    pub fn require_file(&self, producer: Stage, name: &str) -> Result<PathBuf> {
        let path = self.require(producer)?.join(name);
        if !path.is_file() {
            anyhow::bail!(
                "missing {}; it is produced by the `{}` stage, run that first",
                path.display(),
                stage_command(producer)
            );
        }
        Ok(path)
    }

    /// Checksum every file under the stage directory into its manifest.
    pub fn finish(&self, stage: Stage) -> Result<Manifest> {
        let dir = self.dir(stage);
        let mut files = Vec::new();
        collect_files(&dir, &dir, &mut files)?;
        files.retain(|(rel, _)| rel != MANIFEST && !rel.ends_with(".jsonl") && !rel.ends_with(".tmp"));
        files.sort();
        let files = files
            .into_iter()
            .map(|(path, full)| {
                let bytes = fs::read(&full).with_context(|| format!("reading {}", full.display()))?;
                Ok(ManifestEntry { path, sha256: sha256_hex(&bytes) })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest { stage: stage.name().to_string(), files };
        write_json(&dir.join(MANIFEST), &manifest)?;
        Ok(manifest)
    }
}

fn stage_command(stage: Stage) -> &'static str {
    match stage {
        Stage::Select | Stage::Serve => "select` or `serve",
        other => other.name(),
    }
}

fn collect_files(base: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(base, &path, out)?;
        } else {
            let rel = path.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/");
            out.push((rel, path));
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}
