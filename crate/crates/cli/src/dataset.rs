//! Dataset ingestion (PNG images, mask sidecars, clicks, split) and the
//! synthetic dataset generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lesionforge_core::imaging::{resize_to_working, ImageRecord, Mask, Point, WORKING_SIZE};
use lesionforge_core::synth::generate_case;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::layout::{read_json, write_json};

pub const CLICKS_FILE: &str = "clicks.json";
pub const SPLIT_FILE: &str = "split.json";
pub const DATASET_FILE: &str = "dataset.json";
const MASK_SUFFIX: &str = ".mask.png";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Provenance marker written next to generated data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub kind: String,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub split: Split,
    pub info: Option<DatasetInfo>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn train(&self) -> Vec<&ImageRecord> {
        self.split.train.iter().filter_map(|id| self.get(id)).collect()
    }

    pub fn test(&self) -> Vec<&ImageRecord> {
        self.split.test.iter().filter_map(|id| self.get(id)).collect()
    }

    pub fn is_synthetic(&self) -> bool {
        self.info.as_ref().is_some_and(|i| i.kind == "synthetic")
    }
}

fn image_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    if name.ends_with(MASK_SUFFIX) {
        return None;
    }
    name.strip_suffix(".png").map(str::to_string)
}

/// Load every `<id>.png` under `dir` (sorted by id) at the working resolution,
/// with optional `<id>.mask.png` ground truth, `clicks.json` and `split.json`.
pub fn ingest(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist; create it or run the `synth` stage", dir.display());
    }
    let mut paths: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| image_id(&p).map(|id| (id, p)))
        .collect();
    paths.sort();

    let clicks: BTreeMap<String, Point> = match dir.join(CLICKS_FILE) {
        p if p.is_file() => read_json(&p)?,
        _ => BTreeMap::new(),
    };

    let mut records = Vec::new();
    for (id, path) in paths {
        let native = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let (w, h) = native.dimensions();
        let mut rec = ImageRecord::new(id.clone(), resize_to_working(&native));
        rec.source = path.clone();
        let mask_path = dir.join(format!("{id}{MASK_SUFFIX}"));
        if mask_path.is_file() {
            let mask = Mask::from_png(&mask_path)?;
            if (mask.width(), mask.height()) != (w as usize, h as usize) {
                bail!(
                    "mask {} is {}x{} but its image is {w}x{h}",
                    mask_path.display(),
                    mask.width(),
                    mask.height()
                );
            }
            rec.ground_truth = Some(mask.resize_nearest(WORKING_SIZE as usize, WORKING_SIZE as usize));
        }
        if let Some(c) = clicks.get(&id) {
            anyhow::ensure!(c.x < w as usize && c.y < h as usize, "click for {id} lies outside the image");
            let scale = |v: usize, n: u32| v * WORKING_SIZE as usize / n as usize;
            rec.click = Some(Point::new(scale(c.x, w), scale(c.y, h)));
        }
        records.push(rec);
    }
    if records.is_empty() {
        bail!("no PNG images found in {}", dir.display());
    }

    let split = match dir.join(SPLIT_FILE) {
        p if p.is_file() => read_json(&p)?,
        _ => default_split(&records.iter().map(|r| r.id.clone()).collect::<Vec<_>>()),
    };
    check_split(&split, &records)?;
    let info = match dir.join(DATASET_FILE) {
        p if p.is_file() => Some(read_json(&p)?),
        _ => None,
    };
    Ok(Dataset { records, split, info })
}

/// First half (rounded up) for training, the rest for testing.
pub fn default_split(ids: &[String]) -> Split {
    let n_train = ids.len().div_ceil(2);
    Split { train: ids[..n_train].to_vec(), test: ids[n_train..].to_vec() }
}

fn check_split(split: &Split, records: &[ImageRecord]) -> Result<()> {
    let all: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut seen = BTreeSet::new();
    for id in split.train.iter().chain(&split.test) {
        if !all.contains(id.as_str()) {
            bail!("split lists {id}, which is not an ingested image");
        }
        if !seen.insert(id.as_str()) {
            bail!("split lists {id} more than once");
        }
    }
    let missing: Vec<&str> = all.difference(&seen).copied().collect();
    if !missing.is_empty() {
        bail!("split does not assign {}", missing.join(", "));
    }
    if split.train.is_empty() {
        bail!("split has no training images");
    }
    Ok(())
}

/// Write `count` synthetic cases with masks, clicks, split and provenance.
pub fn synth_generate(dir: &Path, count: usize, seed: u64) -> Result<Vec<String>> {
    anyhow::ensure!(count >= 1, "synthetic count must be at least 1");
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let width = count.to_string().len().max(3);
    let mut clicks = BTreeMap::new();
    let mut ids = Vec::new();
    for i in 0..count {
        let id = format!("synth_{i:0width$}");
        let case = generate_case(seed, i);
        case.image.save(dir.join(format!("{id}.png")))?;
        case.mask.to_png(&dir.join(format!("{id}{MASK_SUFFIX}")))?;
        clicks.insert(id.clone(), case.click);
        ids.push(id);
    }
    write_json(&dir.join(CLICKS_FILE), &clicks)?;
    write_json(&dir.join(SPLIT_FILE), &default_split(&ids))?;
    write_json(&dir.join(DATASET_FILE), &DatasetInfo { kind: "synthetic".into(), seed, count })?;
    Ok(ids)
}
