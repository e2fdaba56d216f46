//! Config-driven experiment runner with a content-addressed stage cache.
//!
//! Stages (dataset, backbone, one predictor per row and seed) are stored
//! under a cache root in directories named by the hash of everything that
//! determines their output. A finished stage is reused; an exclusive lock
//! file per stage keeps concurrent runners from training the same cell
//! twice.

mod spec;
mod tables;

use std::fs::File;
use std::path::{Path, PathBuf};

use candle_core::Device;
use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use spec::{
    content_hash, overlay, rollout_for, ExperimentSpec, Preset, ResolvedExperiment, ResolvedRow,
    RowSpec, CODE_VERSION,
};
pub use tables::{merge_tables, render_csv, render_markdown};

use crate::error::{Error, Result};
use crate::evaluation::{
    backbone_ari_fg, evaluate_model, evaluate_upper_bound, export_figures, summarize, ExampleGrid,
    MetricReport, Provenance, SeedEvaluation,
};
use crate::params::ParamStore;
use crate::rollout::{self, RolloutModel, TrainingSummary};
use crate::savi::{self, FlowWindows, Savi};
use crate::scene::dataset::write_atomic;
use crate::scene::{generate_sample, Dataset, DatasetWriter, GeneratorParams};
use crate::training::{encode_dataset, train_predictor, EncodedVideo, TrainingExample};

pub const BUNDLE_FILE: &str = "report.json";
const CELL_FILE: &str = "cell.json";

/// Exclusive advisory lock held for the lifetime of the value.
pub struct StageLock {
    file: File,
}

impl StageLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let parent = dir.parent().unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent)?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let file = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(parent.join(format!("{name}.lock")))?;
        file.lock()?;
        Ok(Self { file })
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

/// Generates `params.num_samples` videos into `root`, streaming to disk.
pub fn generate_dataset(params: &GeneratorParams, root: &Path) -> Result<crate::scene::DatasetManifest> {
    params.validate()?;
    let mut w = DatasetWriter::create(root, params)?;
    for i in 0..params.num_samples as u64 {
        w.append(&generate_sample(i, params)?)?;
    }
    w.finish()
}

/// Dataset for `params` under `cache`, generated once.
pub fn cached_dataset(params: &GeneratorParams, cache: &Path) -> Result<(Dataset, String)> {
    let hash = content_hash(params)?;
    let dir = cache.join("data").join(&hash[..16]);
    let _lock = StageLock::acquire(&dir)?;
    if !dir.join(crate::scene::dataset::MANIFEST_FILE).exists() {
        info!("generating {} videos into {}", params.num_samples, dir.display());
        generate_dataset(params, &dir)?;
    }
    Ok((Dataset::open(&dir)?, hash))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneRecord {
    pub checkpoint: String,
    pub config_hash: String,
    pub param_hash: String,
    /// Held-out full-frame ARI-FG as a fraction.
    pub ari_fg: f64,
    pub gate: f64,
}

/// Trains (or reuses) the encoder for `exp` and returns it frozen.
pub fn cached_backbone(
    exp: &ResolvedExperiment,
    dataset: &Dataset,
    data_hash: &str,
    cache: &Path,
    device: &Device,
) -> Result<(Savi, String, PathBuf)> {
    let key = content_hash(&(data_hash, &exp.encoder, &exp.savi_optim))?;
    let dir = cache.join("savi").join(&key[..16]);
    let _lock = StageLock::acquire(&dir)?;
    if !dir.join(savi::META_FILE).exists() {
        info!("training the encoder into {}", dir.display());
        let splits = &dataset.manifest.splits;
        let train = FlowWindows::load(dataset, &splits.train, &exp.encoder, device)?;
        let val = FlowWindows::load(dataset, &splits.val, &exp.encoder, device)?;
        let fresh = Savi::new(exp.encoder.clone(), ParamStore::seeded(exp.savi_optim.seed), device)?;
        std::fs::create_dir_all(&dir)?;
        let (frozen, report) = savi::train_savi(&fresh, &train, &val, &exp.savi_optim, Some(&dir.join("curve.csv")))?;
        savi::save_checkpoint(&frozen, Some(&exp.savi_optim), Some(&report), &dir)?;
    }
    Ok((savi::load_frozen(&dir, device)?, key, dir))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Trained,
    Cached,
    Failed,
}

/// Outcome of one (row, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub label: String,
    pub seed: u64,
    pub status: CellStatus,
    pub config_hash: String,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellResult {
    summary: TrainingSummary,
    evaluation: SeedEvaluation,
    /// Predicted segmentations of the first test video, row-major.
    example: Vec<Vec<u8>>,
    height: usize,
    width: usize,
}

/// Everything a run produced: resolved configuration, metrics, per-cell
/// provenance and failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentBundle {
    pub name: String,
    pub config_hash: String,
    pub code_version: String,
    pub experiment: ResolvedExperiment,
    pub dataset: String,
    pub backbone: BackboneRecord,
    pub report: MetricReport,
    pub cells: Vec<CellRecord>,
    /// Row labels in table order, including rows without any result.
    pub row_order: Vec<String>,
}

impl ExperimentBundle {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = if dir.is_dir() { dir.join(BUNDLE_FILE) } else { dir.to_path_buf() };
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn count(&self, status: CellStatus) -> usize {
        self.cells.iter().filter(|c| c.status == status).count()
    }
}

struct Videos {
    train: Vec<EncodedVideo>,
    val: Vec<EncodedVideo>,
    test: Vec<EncodedVideo>,
}

fn examples(videos: &[EncodedVideo], ctx: usize, horizon: usize) -> Result<Vec<TrainingExample>> {
    videos.iter().map(|v| v.example(ctx, horizon)).collect()
}

fn run_cell(
    exp: &ResolvedExperiment,
    row: &ResolvedRow,
    seed: u64,
    videos: &Videos,
    frozen: &Savi,
    dir: &Path,
) -> Result<CellResult> {
    let cfg = &row.rollout;
    let train_videos = match row.train_size {
        Some(n) if n > videos.train.len() => {
            return Err(Error::param(
                "train_size",
                format!("{n} exceeds the {} training videos", videos.train.len()),
            ))
        }
        Some(n) => &videos.train[..n],
        None => &videos.train[..],
    };
    let train = examples(train_videos, cfg.context_len, cfg.train_horizon)?;
    let val = examples(&videos.val, cfg.context_len, cfg.train_horizon)?;
    let train_cfg = crate::training::TrainConfig { seed, ..exp.train.clone() };
    let outcome = train_predictor(&train, &val, frozen, cfg, &train_cfg, Some(dir))?;
    let model: RolloutModel = match &outcome.checkpoint {
        Some(p) => rollout::load_checkpoint(p, frozen.device())?,
        None => outcome.model,
    };
    let evaluation = evaluate_model(&model, frozen, &videos.test, cfg.eval_horizon, exp.eval_batch_size, seed)?;
    let (height, width) = (exp.generator.height, exp.generator.width);
    let example = evaluation
        .example
        .as_ref()
        .map(|e| e.iter().map(|a| a.iter().copied().collect()).collect())
        .unwrap_or_default();
    Ok(CellResult {
        summary: outcome.summary,
        evaluation,
        example,
        height,
        width,
    })
}

fn to_arrays(r: &CellResult) -> Result<Vec<ndarray::Array2<u8>>> {
    r.example
        .iter()
        .map(|v| {
            ndarray::Array2::from_shape_vec((r.height, r.width), v.clone())
                .map_err(|e| Error::Config(format!("corrupt cached example: {e}")))
        })
        .collect()
}

/// Runs every (row, seed) cell of `spec` not already in `cache`, evaluates
/// on the test split and writes the bundle, tables and figures to `out`.
pub fn run_experiment(spec: &ExperimentSpec, cache: &Path, out: &Path, device: &Device) -> Result<ExperimentBundle> {
    let exp = spec.resolve()?;
    let config_hash = exp.config_hash()?;
    let (dataset, data_hash) = cached_dataset(&exp.generator, cache)?;
    let (frozen, savi_key, savi_dir) = cached_backbone(&exp, &dataset, &data_hash, cache, device)?;
    let splits = dataset.manifest.splits.clone();
    let test = encode_dataset(&frozen, &dataset, &splits.test, false)?;
    let gate_score = backbone_ari_fg(&frozen, &test)?;
    let backbone = BackboneRecord {
        checkpoint: savi_dir.display().to_string(),
        config_hash: savi_key.clone(),
        param_hash: frozen.store().hash()?,
        ari_fg: gate_score,
        gate: exp.backbone_gate,
    };
    if gate_score <= exp.backbone_gate {
        return Err(Error::Config(format!(
            "backbone gate failed: held-out ARI-FG {gate_score:.3} does not exceed {}",
            exp.backbone_gate
        )));
    }

    let mut videos: Option<Videos> = None;
    let mut cells = Vec::new();
    let mut results: Vec<(usize, u64, CellResult, String, String)> = Vec::new();
    for (ri, row) in exp.rows.iter().enumerate() {
        for &seed in &exp.seeds {
            let train_cfg = crate::training::TrainConfig { seed, ..exp.train.clone() };
            let key = content_hash(&(
                &data_hash,
                &backbone.param_hash,
                &row.rollout,
                &train_cfg,
                row.train_size,
                exp.eval_batch_size,
            ))?;
            let dir = cache.join("cells").join(&key[..16]);
            let lock = StageLock::acquire(&dir)?;
            let cached: Option<CellResult> = std::fs::read(dir.join(CELL_FILE))
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok());
            let (status, outcome) = match cached {
                Some(r) => (CellStatus::Cached, Ok(r)),
                None => {
                    if videos.is_none() {
                        videos = Some(Videos {
                            train: encode_dataset(&frozen, &dataset, &splits.train, false)?,
                            val: encode_dataset(&frozen, &dataset, &splits.val, false)?,
                            test: test.clone(),
                        });
                    }
                    info!("training {} seed {seed} in {}", row.label, dir.display());
                    let r = std::fs::create_dir_all(&dir)
                        .map_err(Error::from)
                        .and_then(|_| run_cell(&exp, row, seed, videos.as_ref().unwrap(), &frozen, &dir));
                    if let Ok(r) = &r {
                        write_atomic(&dir.join(CELL_FILE), &serde_json::to_vec(r)?)?;
                    }
                    (CellStatus::Trained, r)
                }
            };
            drop(lock);
            let checkpoint = dir.join("model").display().to_string();
            match outcome {
                Ok(r) => {
                    cells.push(CellRecord {
                        label: row.label.clone(),
                        seed,
                        status,
                        config_hash: key.clone(),
                        checkpoint: Some(checkpoint.clone()),
                        error: None,
                    });
                    results.push((ri, seed, r, checkpoint, key));
                }
                Err(e) => {
                    warn!("{} seed {seed} failed: {e}", row.label);
                    cells.push(CellRecord {
                        label: row.label.clone(),
                        seed,
                        status: CellStatus::Failed,
                        config_hash: key,
                        checkpoint: None,
                        error: Some(format!("{}: {e}", e.kind())),
                    });
                }
            }
        }
    }

    let horizon = exp.rows.first().map_or(24, |r| r.rollout.eval_horizon);
    let context_len = exp.rows.first().map_or(6, |r| r.rollout.context_len);
    let mut report_rows = Vec::new();
    let mut example = match test.first() {
        Some(v) => {
            let steps: Vec<usize> = exp.example_steps.iter().copied().filter(|&s| s <= horizon).collect();
            Some(ExampleGrid::new(v, context_len, &steps)?)
        }
        None => None,
    };
    for (ri, row) in exp.rows.iter().enumerate() {
        let mine: Vec<_> = results.iter().filter(|r| r.0 == ri).collect();
        if mine.is_empty() {
            continue;
        }
        let evals: Vec<SeedEvaluation> = mine.iter().map(|r| r.2.evaluation.clone()).collect();
        let prov = mine
            .iter()
            .map(|r| Provenance {
                seed: r.1,
                checkpoint: r.3.clone(),
                config_hash: r.4.clone(),
            })
            .collect();
        report_rows.push(summarize(&row.label, Some(row.variant), &evals, prov)?);
        if let Some(grid) = example.as_mut() {
            grid.add(&row.label, &to_arrays(&mine[0].2)?)?;
        }
    }
    let mut row_order: Vec<String> = exp.rows.iter().map(|r| r.label.clone()).collect();
    if exp.upper_bound {
        let ub = evaluate_upper_bound(&frozen, &test, context_len, horizon)?;
        if let (Some(grid), Some(segs)) = (example.as_mut(), ub.example.as_ref()) {
            grid.add("SAVi", segs)?;
        }
        let prov = vec![Provenance {
            seed: exp.savi_optim.seed,
            checkpoint: backbone.checkpoint.clone(),
            config_hash: backbone.config_hash.clone(),
        }];
        report_rows.push(summarize("SAVi", None, &[ub], prov)?);
        row_order.push("SAVi".into());
    }
    let bundle = ExperimentBundle {
        name: exp.name.clone(),
        config_hash,
        code_version: CODE_VERSION.into(),
        dataset: dataset.root().display().to_string(),
        backbone,
        report: MetricReport {
            context_len,
            horizon,
            num_samples: test.len(),
            rows: report_rows,
            example,
        },
        cells,
        row_order,
        experiment: exp,
    };
    write_bundle(&bundle, out)?;
    Ok(bundle)
}

/// Writes `report.json`, `table.md`, `table.csv` and `figures/` into `out`.
pub fn write_bundle(bundle: &ExperimentBundle, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join(BUNDLE_FILE), &serde_json::to_vec_pretty(bundle)?)?;
    write_atomic(&out.join("table.md"), render_markdown(bundle).as_bytes())?;
    write_atomic(&out.join("table.csv"), render_csv(bundle)?.as_bytes())?;
    export_figures(&bundle.report, &out.join("figures"))?;
    Ok(())
}
