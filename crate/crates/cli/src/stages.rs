//! Stage implementations. Every stage reads its inputs from the data directory
//! and upstream stage directories and writes only under its own directory.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use lesionforge_core::candidates::{
    auto_select, build_mask_pair, candidate_overlay, center_of_mass, extract_candidates, CandidateInfo, MaskCandidate,
    MaskPair, Selection,
};
use lesionforge_core::cluster::{train_clustering, EpochRecord};
use lesionforge_core::dqn::{build_dqn, predict, train, TrainLog};
use lesionforge_core::env::{predicted_mask, Action, Environment};
use lesionforge_core::eval::{
    dice, evaluate_forced, evaluate_testset, fit_sigmoid, welch_t_test, DiceReport, SigmoidFit, TestItem, WelchResult,
};
use lesionforge_core::imaging::{ImageRecord, LabelMap, Point, WORKING_SIZE};
use lesionforge_core::nn::{checkpoint, Network};
use lesionforge_core::superpixel::{slic_segment, SuperpixelMap};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::{ingest, synth_generate, Dataset};
use crate::layout::{read_json, write_json, RunLayout, Stage};

pub const SUMMARY: &str = "summary.json";
pub const SELECTIONS: &str = "selections.json";
pub const JOURNAL: &str = "journal.jsonl";
pub const CHECKPOINT: &str = "dqn.ckpt";
pub const TRAIN_LOG_JSON: &str = "trainlog.json";
pub const TRAIN_LOG_CSV: &str = "trainlog.csv";
pub const PAIRS: &str = "pairs.json";
pub const PREDICTIONS: &str = "predictions.json";
pub const DICE_JSON: &str = "dice.json";
pub const DICE_CSV: &str = "dice.csv";
pub const BASELINE_JSON: &str = "baseline_dice.json";
pub const COMPARISON: &str = "comparison.json";
pub const CURVE_FIT: &str = "curve_fit.json";
pub const TRAIN_LOG_FIT_CSV: &str = "trainlog_fit.csv";
pub const REPORT: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelSummary {
    pub image_id: String,
    pub count: usize,
    pub mean_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub image_id: String,
    pub stopping_epoch: usize,
    pub distinct_count: usize,
    pub converged: bool,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateFile {
    pub image_id: String,
    pub candidates: Vec<CandidateInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInfo {
    pub image_id: String,
    pub cluster_id: u32,
    pub fiducial: Point,
    pub region_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairsFile {
    pub train: Vec<PairInfo>,
    pub test: Vec<PairInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub action: u8,
    pub q: [f64; 2],
    pub cluster_id: u32,
    pub fiducial: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub statistical_test: String,
    pub rl_mean: f64,
    pub rl_std: f64,
    pub baseline: String,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    pub welch: Option<WelchResult>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    /// `(episode, held-out accuracy)`, episodes counted from 1.
    pub points: Vec<(f64, f64)>,
    pub fit: Option<SigmoidFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub superpixels: SuperpixelSection,
    pub clustering: ClusteringSection,
    pub rl: RlSection,
    pub dice: DiceReport,
    pub baseline_dice: DiceReport,
    pub comparison: Comparison,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub kind: String,
    pub note: String,
    pub test_fiducial: String,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelSection {
    pub min_count: usize,
    pub max_count: usize,
    pub mean_region_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSection {
    pub stopping_epochs: BTreeMap<String, usize>,
    pub all_converged: bool,
    pub candidate_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlSection {
    pub episodes: usize,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: Option<f64>,
    /// First episode (from 1) with every held-out image correct.
    pub first_perfect_test_episode: Option<usize>,
    pub curve: CurveFit,
}

/// Rayon pool honouring `LESIONFORGE_THREADS`.
fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("LESIONFORGE_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow!("LESIONFORGE_THREADS must be a positive integer, got {v:?}"))?;
        anyhow::ensure!(n > 0, "LESIONFORGE_THREADS must be a positive integer");
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

fn gt_center(rec: &ImageRecord) -> Option<Point> {
    rec.ground_truth.as_ref().and_then(|m| center_of_mass(m).ok()).map(|c| c.pixel())
}

/// Fiducial used for held-out images: the ground-truth centre of mass when a
/// mask is supplied, else the recorded click.
pub fn test_fiducial(rec: &ImageRecord) -> Option<Point> {
    gt_center(rec).or(rec.click)
}

/// Click used for headless selection: the recorded click, else the
/// ground-truth centre of mass.
pub fn headless_click(rec: &ImageRecord) -> Option<Point> {
    rec.click.or_else(|| gt_center(rec))
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub layout: RunLayout,
    /// Selections file for `train-rl` instead of the run's own.
    pub selections: Option<PathBuf>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let layout = RunLayout::new(&config.out_dir, &config.run_id);
        Ok(Self { config, layout, selections: None })
    }

    pub fn dataset(&self) -> Result<Dataset> {
        ingest(&self.config.data_dir)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Synth => self.synth(),
            Stage::Superpixels => self.superpixels(),
            Stage::Cluster => self.cluster(),
            Stage::Candidates => self.candidates(),
            Stage::Select => self.select(),
            Stage::Serve => self.serve(),
            Stage::TrainRl => self.train_rl(),
            Stage::Predict => self.predict(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report().map(|_| ()),
            Stage::All => {
                for s in [
                    Stage::Superpixels,
                    Stage::Cluster,
                    Stage::Candidates,
                    Stage::Select,
                    Stage::TrainRl,
                    Stage::Predict,
                    Stage::Evaluate,
                    Stage::Report,
                ] {
                    info!("stage {s}");
                    self.run(s)?;
                }
                Ok(())
            }
        }
    }

    pub fn synth(&self) -> Result<()> {
        let ids = synth_generate(&self.config.data_dir, self.config.synth.count, self.config.seed)?;
        info!("wrote {} synthetic cases to {}", ids.len(), self.config.data_dir.display());
        Ok(())
    }

    fn labels(&self, stage: Stage, id: &str) -> Result<LabelMap> {
        let path = self.layout.require_file(stage, &format!("{id}.png"))?;
        Ok(LabelMap::from_png16(&path)?)
    }

    pub fn superpixels(&self) -> Result<()> {
        let ds = self.dataset()?;
        let dir = self.layout.prepare(Stage::Superpixels)?;
        let slic = self.config.slic();
        let rows = pool()?.install(|| {
            ds.records
                .par_iter()
                .map(|rec| {
                    let sp = slic_segment(&rec.pixels, &slic)?;
                    sp.labels.to_png16(&dir.join(format!("{}.png", rec.id)))?;
                    Ok(SuperpixelSummary { image_id: rec.id.clone(), count: sp.count, mean_size: sp.mean_size() })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        write_json(&dir.join(SUMMARY), &rows)?;
        self.layout.finish(Stage::Superpixels)?;
        Ok(())
    }

    pub fn cluster(&self) -> Result<()> {
        let ds = self.dataset()?;
        self.layout.require(Stage::Superpixels)?;
        let dir = self.layout.prepare(Stage::Cluster)?;
        let rows = pool()?.install(|| {
            ds.records
                .par_iter()
                .map(|rec| {
                    let sp = SuperpixelMap::from_labels(self.labels(Stage::Superpixels, &rec.id)?)?;
                    let run = train_clustering(&rec.pixels, &sp, &self.config.cluster_for(&rec.id))
                        .with_context(|| format!("clustering {}", rec.id))?;
                    let l = run.labeling;
                    l.labels.to_png16(&dir.join(format!("{}.png", rec.id)))?;
                    info!("{}: {} clusters after {:?} epochs", rec.id, l.distinct_count, l.stopping_epoch());
                    if !l.converged {
                        warn!("{}: clustering stopped at the epoch limit with {} labels", rec.id, l.distinct_count);
                    }
                    Ok(ClusterSummary {
                        image_id: rec.id.clone(),
                        stopping_epoch: l.stopping_epoch().unwrap_or(0),
                        distinct_count: l.distinct_count,
                        converged: l.converged,
                        history: l.epoch_history,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        write_json(&dir.join(SUMMARY), &rows)?;
        self.layout.finish(Stage::Cluster)?;
        Ok(())
    }

    /// Size-filtered candidates of one image, recomputed from its cluster labels.
    pub fn candidate_masks(&self, id: &str) -> Result<Vec<MaskCandidate>> {
        Ok(extract_candidates(&self.labels(Stage::Cluster, id)?)?)
    }

    pub fn candidates(&self) -> Result<()> {
        let ds = self.dataset()?;
        self.layout.require(Stage::Cluster)?;
        let dir = self.layout.prepare(Stage::Candidates)?;
        pool()?.install(|| {
            ds.records.par_iter().try_for_each(|rec| -> Result<()> {
                let cands = self.candidate_masks(&rec.id)?;
                if cands.is_empty() {
                    warn!("{}: no cluster passes the size filter", rec.id);
                }
                let tiles = dir.join(&rec.id);
                std::fs::create_dir_all(&tiles)?;
                for c in &cands {
                    candidate_overlay(&rec.pixels, c).save(tiles.join(format!("{}.png", c.cluster_id)))?;
                }
                let file = CandidateFile { image_id: rec.id.clone(), candidates: cands.iter().map(Into::into).collect() };
                write_json(&dir.join(format!("{}.json", rec.id)), &file)
            })
        })?;
        self.layout.finish(Stage::Candidates)?;
        Ok(())
    }

    /// Headless selection: the candidate containing the image's click.
    pub fn select(&self) -> Result<()> {
        let ds = self.dataset()?;
        self.layout.require(Stage::Candidates)?;
        let dir = self.layout.prepare(Stage::Select)?;
        let mut selections = Vec::new();
        for rec in ds.train() {
            let click = headless_click(rec)
                .ok_or_else(|| anyhow!("{} has neither a click nor a ground-truth mask to select with", rec.id))?;
            let cands = self.candidate_masks(&rec.id)?;
            let sel = auto_select(&rec.id, &cands, click)
                .ok_or_else(|| anyhow!("{} has no candidate masks to select from", rec.id))?;
            if sel.click() != click {
                warn!("{}: click is in no candidate; using the nearest candidate {}", rec.id, sel.chosen_cluster_id);
            }
            selections.push(sel);
        }
        lesionforge_server::write_selections(&dir.join(SELECTIONS), &selections)?;
        self.layout.finish(Stage::Select)?;
        Ok(())
    }

    pub fn serve(&self) -> Result<()> {
        let ds = self.dataset()?;
        self.layout.require(Stage::Candidates)?;
        let dir = self.layout.prepare(Stage::Serve)?;
        let images = ds
            .train()
            .into_iter()
            .map(|rec| {
                Ok(lesionforge_server::ServedImage {
                    id: rec.id.clone(),
                    image: rec.pixels.clone(),
                    candidates: self.candidate_masks(&rec.id)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let session = lesionforge_server::Session::open(
            lesionforge_server::SessionConfig {
                run_id: self.config.run_id.clone(),
                journal_path: dir.join(JOURNAL),
                selections_path: dir.join(SELECTIONS),
                static_dir: self.config.server.static_dir.clone(),
            },
            images,
        )?;
        let rt = tokio::runtime::Runtime::new()?;
        rt.block_on(lesionforge_server::serve(session, self.config.server.port))?;
        Ok(())
    }

    fn selections_path(&self) -> PathBuf {
        self.selections.clone().unwrap_or_else(|| self.layout.dir(Stage::Select).join(SELECTIONS))
    }

    fn environment(&self, rec: &ImageRecord, pair: MaskPair) -> Result<Environment> {
        Ok(Environment::new(rec, pair, self.config.env.clone())?)
    }

    /// Held-out pairs: the cluster containing each image's fiducial.
    fn test_pairs(&self, ds: &Dataset) -> Result<Vec<(ImageRecord, MaskPair)>> {
        let mut out = Vec::new();
        for rec in ds.test() {
            let Some(p) = test_fiducial(rec) else {
                warn!("{}: no click or ground truth; left out of testing", rec.id);
                continue;
            };
            let labels = self.labels(Stage::Cluster, &rec.id)?;
            match build_mask_pair(&rec.id, &labels, labels.get(p.x, p.y), Some(p)) {
                Ok(pair) => out.push((rec.clone(), pair)),
                Err(e) => warn!("{}: {e}; left out of testing", rec.id),
            }
        }
        Ok(out)
    }

    fn train_pairs(&self, ds: &Dataset) -> Result<Vec<(ImageRecord, MaskPair)>> {
        let path = self.selections_path();
        if !path.is_file() {
            bail!(
                "no selections file at {}; pick masks with `lesionforge serve` or write headless selections \
                 with `lesionforge select` (or pass --selections <file>)",
                path.display()
            );
        }
        let selections: Vec<Selection> = read_json(&path)?;
        let mut out = Vec::new();
        for sel in &selections {
            let rec = ds
                .get(&sel.image_id)
                .ok_or_else(|| anyhow!("selection for unknown image {}", sel.image_id))?;
            if !ds.split.train.contains(&sel.image_id) {
                bail!("selection for {} which is not a training image", sel.image_id);
            }
            let labels = self.labels(Stage::Cluster, &sel.image_id)?;
            let pair = build_mask_pair(&sel.image_id, &labels, sel.chosen_cluster_id, Some(sel.click()))
                .with_context(|| format!("selection in {}", path.display()))?;
            out.push((rec.clone(), pair));
        }
        let missing: Vec<&str> =
            ds.split.train.iter().filter(|id| !selections.iter().any(|s| &s.image_id == *id)).map(String::as_str).collect();
        if !missing.is_empty() {
            warn!("training without selections for {}", missing.join(", "));
        }
        anyhow::ensure!(!out.is_empty(), "selections file {} is empty", path.display());
        Ok(out)
    }

    pub fn train_rl(&self) -> Result<()> {
        let ds = self.dataset()?;
        let train_pairs = self.train_pairs(&ds)?;
        let test_pairs = self.test_pairs(&ds)?;
        let dir = self.layout.prepare(Stage::TrainRl)?;
        let info = |v: &[(ImageRecord, MaskPair)]| {
            v.iter()
                .map(|(_, p)| PairInfo {
                    image_id: p.image_id.clone(),
                    cluster_id: 0,
                    fiducial: p.fiducial,
                    region_size: p.mask.count(),
                })
                .collect::<Vec<_>>()
        };
        let mut pairs = PairsFile { train: info(&train_pairs), test: info(&test_pairs) };
        for (row, (rec, _)) in pairs.train.iter_mut().chain(pairs.test.iter_mut()).zip(train_pairs.iter().chain(&test_pairs)) {
            row.cluster_id = self.labels(Stage::Cluster, &rec.id)?.get(row.fiducial.x, row.fiducial.y);
        }
        let train_envs =
            train_pairs.into_iter().map(|(r, p)| self.environment(&r, p)).collect::<Result<Vec<_>>>()?;
        let test_envs = test_pairs.into_iter().map(|(r, p)| self.environment(&r, p)).collect::<Result<Vec<_>>>()?;
        let outcome = train(&train_envs, &test_envs, &self.config.agent())?;
        checkpoint::save(&outcome.network, &dir.join(CHECKPOINT))?;
        write_json(&dir.join(TRAIN_LOG_JSON), &outcome.log)?;
        std::fs::write(dir.join(TRAIN_LOG_CSV), outcome.log.to_csv()?)?;
        write_json(&dir.join(PAIRS), &pairs)?;
        self.layout.finish(Stage::TrainRl)?;
        Ok(())
    }

    fn load_network(&self) -> Result<Network<f32>> {
        let path = self.layout.require_file(Stage::TrainRl, CHECKPOINT)?;
        let side = WORKING_SIZE as usize;
        let mut net = build_dqn::<f32>(&self.config.agent(), side, side)?;
        checkpoint::load_into(&mut net, &path)?;
        Ok(net)
    }

    pub fn predict(&self) -> Result<()> {
        let ds = self.dataset()?;
        self.layout.require(Stage::Cluster)?;
        let mut net = self.load_network()?;
        let dir = self.layout.prepare(Stage::Predict)?;
        let mut rows = Vec::new();
        for (rec, pair) in self.test_pairs(&ds)? {
            let env = self.environment(&rec, pair)?;
            let (action, q) = predict(&mut net, &env.reset().tensor)?;
            let mask = predicted_mask(action, &env.pair);
            mask.to_png(&dir.join(format!("{}.png", rec.id)))?;
            let (w, h) = image::image_dimensions(&rec.source).unwrap_or((WORKING_SIZE, WORKING_SIZE));
            mask.resize_nearest(w as usize, h as usize).to_png(&dir.join(format!("{}.native.png", rec.id)))?;
            let labels = self.labels(Stage::Cluster, &rec.id)?;
            rows.push(Prediction {
                image_id: rec.id.clone(),
                action: action.number(),
                q,
                cluster_id: labels.get(env.pair.fiducial.x, env.pair.fiducial.y),
                fiducial: env.pair.fiducial,
            });
        }
        write_json(&dir.join(PREDICTIONS), &rows)?;
        self.layout.finish(Stage::Predict)?;
        Ok(())
    }

    pub fn evaluate(&self) -> Result<()> {
        let ds = self.dataset()?;
        self.layout.require(Stage::Cluster)?;
        let mut net = self.load_network()?;
        let log: TrainLog = read_json(&self.layout.require_file(Stage::TrainRl, TRAIN_LOG_JSON)?)?;
        let items = self
            .test_pairs(&ds)?
            .into_iter()
            .map(|(rec, pair)| Ok(TestItem { ground_truth: rec.ground_truth.clone(), env: self.environment(&rec, pair)? }))
            .collect::<Result<Vec<_>>>()?;
        anyhow::ensure!(!items.is_empty(), "no test images with a fiducial to evaluate");
        let report = evaluate_testset(&mut net, &items)?;
        let baseline = evaluate_forced(&items, Action::Outside)?;
        let dir = self.layout.prepare(Stage::Evaluate)?;

        let (welch, note) = match welch_t_test(&report.scores(), &baseline.scores()) {
            Ok(w) => (Some(w), None),
            Err(e) => (None, Some(format!("t-test not computed: {e}"))),
        };
        let comparison = Comparison {
            statistical_test: "welch".into(),
            rl_mean: report.mean,
            rl_std: report.std,
            baseline: "forced complement region".into(),
            baseline_mean: baseline.mean,
            baseline_std: baseline.std,
            welch,
            note,
        };
        let points: Vec<(f64, f64)> = log.test_curve().into_iter().map(|(e, a)| ((e + 1) as f64, a)).collect();
        let fit = if points.len() >= 4 { Some(fit_sigmoid(&points)?) } else { None };
        let curve = CurveFit { points, fit };

        write_json(&dir.join(DICE_JSON), &report)?;
        write_json(&dir.join(BASELINE_JSON), &baseline)?;
        write_json(&dir.join(COMPARISON), &comparison)?;
        write_json(&dir.join(CURVE_FIT), &curve)?;
        std::fs::write(dir.join(DICE_CSV), dice_csv(&report)?)?;
        std::fs::write(dir.join(TRAIN_LOG_FIT_CSV), log_with_fit(&log, fit.as_ref())?)?;
        self.layout.finish(Stage::Evaluate)?;
        Ok(())
    }

    pub fn report(&self) -> Result<Report> {
        let ds = self.dataset()?;
        let sp: Vec<SuperpixelSummary> = read_json(&self.layout.require_file(Stage::Superpixels, SUMMARY)?)?;
        let cl: Vec<ClusterSummary> = read_json(&self.layout.require_file(Stage::Cluster, SUMMARY)?)?;
        let log: TrainLog = read_json(&self.layout.require_file(Stage::TrainRl, TRAIN_LOG_JSON)?)?;
        let dice_report: DiceReport = read_json(&self.layout.require_file(Stage::Evaluate, DICE_JSON)?)?;
        let baseline: DiceReport = read_json(&self.layout.require_file(Stage::Evaluate, BASELINE_JSON)?)?;
        let comparison: Comparison = read_json(&self.layout.require_file(Stage::Evaluate, COMPARISON)?)?;
        let curve: CurveFit = read_json(&self.layout.require_file(Stage::Evaluate, CURVE_FIT)?)?;
        let mut candidate_counts = BTreeMap::new();
        for rec in &ds.records {
            let f: CandidateFile = read_json(&self.layout.require_file(Stage::Candidates, &format!("{}.json", rec.id))?)?;
            candidate_counts.insert(rec.id.clone(), f.candidates.len());
        }
        let last = log.episodes.last().ok_or_else(|| anyhow!("training log is empty"))?;
        let (kind, note) = if ds.is_synthetic() {
            ("synthetic", "synthetic proxy data; scores are not comparable to results on clinical images")
        } else {
            ("ingested", "user-supplied images")
        };
        let report = Report {
            run_id: self.config.run_id.clone(),
            seed: self.config.seed,
            dataset: DatasetSection {
                kind: kind.into(),
                note: note.into(),
                test_fiducial: "ground-truth centre of mass where a mask is supplied, else the recorded click; \
                                test Dice is not blind to the ground truth"
                    .into(),
                train: ds.split.train.clone(),
                test: ds.split.test.clone(),
            },
            superpixels: SuperpixelSection {
                min_count: sp.iter().map(|s| s.count).min().unwrap_or(0),
                max_count: sp.iter().map(|s| s.count).max().unwrap_or(0),
                mean_region_size: sp.iter().map(|s| s.mean_size).sum::<f64>() / sp.len().max(1) as f64,
            },
            clustering: ClusteringSection {
                stopping_epochs: cl.iter().map(|c| (c.image_id.clone(), c.stopping_epoch)).collect(),
                all_converged: cl.iter().all(|c| c.converged),
                candidate_counts,
            },
            rl: RlSection {
                episodes: log.episodes.len(),
                final_train_accuracy: last.train_greedy_accuracy,
                final_test_accuracy: last.test_greedy_accuracy,
                first_perfect_test_episode: log
                    .episodes
                    .iter()
                    .find(|e| e.test_greedy_accuracy == Some(1.0))
                    .map(|e| e.episode + 1),
                curve,
            },
            dice: dice_report,
            baseline_dice: baseline,
            comparison,
        };
        let dir = self.layout.prepare(Stage::Report)?;
        write_json(&dir.join(REPORT), &report)?;
        self.layout.finish(Stage::Report)?;
        info!("mean test Dice {:.3} (sd {:.3})", report.dice.mean, report.dice.std);
        Ok(report)
    }
}

fn dice_csv(report: &DiceReport) -> Result<String> {
    let mut s = String::from("image_id,dice,action\n");
    for r in &report.rows {
        s.push_str(&format!("{},{},{}\n", r.image_id, r.dice, r.action.map(|a| a.to_string()).unwrap_or_default()));
    }
    Ok(s)
}

/// Training log CSV with the fitted held-out curve as an extra column.
fn log_with_fit(log: &TrainLog, fit: Option<&SigmoidFit>) -> Result<String> {
    let csv = log.to_csv()?;
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        out.push_str(line);
        if i == 0 {
            out.push_str(",test_accuracy_fit");
        } else if let Some(f) = fit {
            out.push_str(&format!(",{}", f.eval(i as f64)));
        } else {
            out.push(',');
        }
        out.push('\n');
    }
    Ok(out)
}

/// Best Dice among an image's candidates against its ground truth.
pub fn best_candidate_dice(cands: &[MaskCandidate], rec: &ImageRecord) -> Option<f64> {
    let gt = rec.ground_truth.as_ref()?;
    cands.iter().filter_map(|c| dice(&c.pixel_set, gt).ok()).max_by(f64::total_cmp)
}
