//! Segmentation and state metrics, rollout evaluation and report figures.
//!
//! Scores are computed per frame, averaged over the frames of a video, then
//! over videos, then over seeds. Reports use a percentage scale.

mod figures;
mod metrics;

use std::collections::BTreeMap;

use candle_core::Tensor;
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use figures::{curve_csv, export_figures, grid_image, plot_curves, FIGURE_COLORS};
pub use metrics::{ari, hungarian_max, mean_iou, state_mae};

use crate::error::{Error, Result};
use crate::rollout::{pad_states, RolloutModel, Variant};
use crate::savi::Savi;
use crate::training::EncodedVideo;

/// Scores of one frame in [0, 1]; `None` where the frame is skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub miou: Option<f64>,
    pub miou_fg: Option<f64>,
    pub ari: Option<f64>,
    pub ari_fg: Option<f64>,
}

impl FrameScores {
    pub fn compute(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<Self> {
        let (p, g) = (pred.view(), gt.view());
        Ok(Self {
            miou: mean_iou(&p, &g, false)?,
            miou_fg: mean_iou(&p, &g, true)?,
            ari: ari(&p, &g, false)?,
            ari_fg: ari(&p, &g, true)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Miou,
    MiouFg,
    Ari,
    AriFg,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Miou, Metric::MiouFg, Metric::Ari, Metric::AriFg];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Miou => "mIoU",
            Metric::MiouFg => "mIoU-FG",
            Metric::Ari => "ARI",
            Metric::AriFg => "ARI-FG",
        }
    }

    fn get(self, s: &FrameScores) -> Option<f64> {
        match self {
            Metric::Miou => s.miou,
            Metric::MiouFg => s.miou_fg,
            Metric::Ari => s.ari,
            Metric::AriFg => s.ari_fg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub id: u64,
    pub frames: Vec<FrameScores>,
    /// Per-frame state MAE when the model exposes physical states.
    pub state_mae: Option<Vec<f64>>,
}

/// Scores of one trained model (one seed) on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub seed: u64,
    pub videos: Vec<VideoScores>,
    /// Predicted segmentations of the first test video, one per frame.
    #[serde(skip)]
    pub example: Option<Vec<Array2<u8>>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl SeedEvaluation {
    /// Frame mean per video, then mean over videos.
    pub fn overall(&self, metric: Metric) -> Option<f64> {
        mean(
            self.videos
                .iter()
                .filter_map(|v| mean(v.frames.iter().filter_map(|f| metric.get(f)))),
        )
    }

    /// Mean over videos at each frame.
    pub fn per_frame(&self, metric: Metric) -> Vec<Option<f64>> {
        let t = self.videos.first().map_or(0, |v| v.frames.len());
        (0..t)
            .map(|i| mean(self.videos.iter().filter_map(|v| metric.get(&v.frames[i]))))
            .collect()
    }

    pub fn per_frame_state_mae(&self) -> Option<Vec<f64>> {
        let rows: Vec<&Vec<f64>> = self.videos.iter().filter_map(|v| v.state_mae.as_ref()).collect();
        if rows.is_empty() || rows.len() != self.videos.len() {
            return None;
        }
        Some(
            (0..rows[0].len())
                .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
                .collect(),
        )
    }
}

/// Mean and sample standard deviation over seeds, percentage scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n.max(1.0);
        let std = if per_seed.len() >= 2 {
            (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, per_seed }
    }
}

/// Where a report row came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub checkpoint: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    /// `None` for the encoder upper bound.
    pub variant: Option<Variant>,
    pub seeds: Vec<u64>,
    pub miou: MetricSummary,
    pub miou_fg: MetricSummary,
    pub ari: MetricSummary,
    pub ari_fg: MetricSummary,
    /// Seed-mean mIoU per predicted frame.
    pub per_frame_miou: Vec<f64>,
    pub per_frame_miou_by_seed: Vec<Vec<f64>>,
    /// Seed-mean state MAE per predicted frame (world units).
    pub state_mae: Option<Vec<f64>>,
    pub num_samples: usize,
    pub provenance: Vec<Provenance>,
}

impl VariantReport {
    pub fn metric(&self, m: Metric) -> &MetricSummary {
        match m {
            Metric::Miou => &self.miou,
            Metric::MiouFg => &self.miou_fg,
            Metric::Ari => &self.ari,
            Metric::AriFg => &self.ari_fg,
        }
    }

    /// Least-squares slope of the per-frame mIoU curve of each seed.
    pub fn curve_slopes(&self) -> Vec<f64> {
        self.per_frame_miou_by_seed.iter().map(|c| ls_slope(c)).collect()
    }
}

/// Least-squares slope of `y` against frame numbers `1..=len`.
pub fn ls_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let xm = (n + 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = (i + 1) as f64 - xm;
        num += dx * (v - ym);
        den += dx * dx;
    }
    num / den
}

/// Aggregates seed evaluations into a report row (×100).
pub fn summarize(
    name: &str,
    variant: Option<Variant>,
    seeds: &[SeedEvaluation],
    provenance: Vec<Provenance>,
) -> Result<VariantReport> {
    if seeds.is_empty() {
        return Err(Error::Config(format!("no evaluations to summarize for {name}")));
    }
    let summary = |m: Metric| {
        MetricSummary::from_values(seeds.iter().map(|s| 100.0 * s.overall(m).unwrap_or(0.0)).collect())
    };
    let by_seed: Vec<Vec<f64>> = seeds
        .iter()
        .map(|s| {
            s.per_frame(Metric::Miou)
                .into_iter()
                .map(|v| 100.0 * v.unwrap_or(0.0))
                .collect()
        })
        .collect();
    let frames = by_seed[0].len();
    let per_frame = (0..frames)
        .map(|i| by_seed.iter().map(|c| c[i]).sum::<f64>() / by_seed.len() as f64)
        .collect();
    let maes: Option<Vec<Vec<f64>>> = seeds.iter().map(|s| s.per_frame_state_mae()).collect();
    let state_mae = maes.map(|m| {
        (0..m[0].len())
            .map(|i| m.iter().map(|c| c[i]).sum::<f64>() / m.len() as f64)
            .collect()
    });
    Ok(VariantReport {
        name: name.to_string(),
        variant,
        seeds: seeds.iter().map(|s| s.seed).collect(),
        miou: summary(Metric::Miou),
        miou_fg: summary(Metric::MiouFg),
        ari: summary(Metric::Ari),
        ari_fg: summary(Metric::AriFg),
        per_frame_miou: per_frame,
        per_frame_miou_by_seed: by_seed,
        state_mae,
        num_samples: seeds[0].videos.len(),
        provenance,
    })
}

/// Ground truth and predictions for a qualitative grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleGrid {
    pub video_id: u64,
    /// 1-based unroll steps shown as columns.
    pub steps: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub ground_truth: Vec<Vec<u8>>,
    pub predictions: BTreeMap<String, Vec<Vec<u8>>>,
}

impl ExampleGrid {
    pub fn new(video: &EncodedVideo, context_len: usize, steps: &[usize]) -> Result<Self> {
        let (_, h, w) = video.seg.dim();
        let gt = steps
            .iter()
            .map(|&s| {
                let t = context_len + s - 1;
                if s == 0 || t >= video.seg.dim().0 {
                    return Err(Error::param("example_steps", format!("step {s} is outside the video")));
                }
                Ok(video.seg.index_axis(Axis(0), t).iter().copied().collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            video_id: video.id,
            steps: steps.to_vec(),
            height: h,
            width: w,
            ground_truth: gt,
            predictions: BTreeMap::new(),
        })
    }

    /// Adds the frames of `segs` (indexed by unroll step - 1) under `name`.
    pub fn add(&mut self, name: &str, segs: &[Array2<u8>]) -> Result<()> {
        let cells = self
            .steps
            .iter()
            .map(|&s| {
                segs.get(s - 1)
                    .map(|a| a.iter().copied().collect())
                    .ok_or_else(|| Error::param("example_steps", format!("step {s} was not predicted")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.predictions.insert(name.to_string(), cells);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub context_len: usize,
    pub horizon: usize,
    pub num_samples: usize,
    pub rows: Vec<VariantReport>,
    pub example: Option<ExampleGrid>,
}

impl MetricReport {
    pub fn row(&self, name: &str) -> Option<&VariantReport> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn row_for(&self, variant: Variant) -> Option<&VariantReport> {
        self.rows.iter().find(|r| r.variant == Some(variant))
    }
}

fn segment_frames(frozen: &Savi, latents: &Tensor) -> Result<Vec<Array2<u8>>> {
    const CHUNK: usize = 16;
    let (b, t, s, d) = latents.dims4()?;
    let flat = latents.reshape((b * t, s, d))?.to_dtype(frozen.dtype())?;
    let mut out = Vec::with_capacity(b * t);
    for start in (0..b * t).step_by(CHUNK) {
        let len = CHUNK.min(b * t - start);
        let seg = frozen.segmentation_from_slots(&flat.narrow(0, start, len)?)?;
        out.extend(seg.outer_iter().map(|v| v.to_owned()));
    }
    Ok(out)
}

/// Rolls `model` out for `horizon` frames after the first `context_len`
/// frames of each video and scores the decoded segmentations.
pub fn evaluate_model(
    model: &RolloutModel,
    frozen: &Savi,
    videos: &[EncodedVideo],
    horizon: usize,
    batch_size: usize,
    seed: u64,
) -> Result<SeedEvaluation> {
    let n = model.config().context_len;
    let s = model.config().num_slots;
    let device = frozen.device();
    let mut out = Vec::with_capacity(videos.len());
    let mut example = None;
    for chunk in videos.chunks(batch_size.max(1)) {
        let mut ctx = Vec::with_capacity(chunk.len());
        let mut rows = Vec::with_capacity(chunk.len());
        for v in chunk {
            if v.frames()? < n + horizon {
                return Err(Error::ShapeMismatch {
                    field: "video".into(),
                    detail: format!("video {} has {} frames, need {}", v.id, v.frames()?, n + horizon),
                });
            }
            ctx.push(v.latents.narrow(0, 0, n)?);
            rows.push(v.states[n - 1].clone());
        }
        let (gt, active) = pad_states(&rows, s, device)?;
        let roll = model.rollout(&Tensor::stack(&ctx, 0)?, horizon, Some(&gt), Some(&active))?;
        let segs = segment_frames(frozen, &roll.latents.detach())?;
        let states: Option<Vec<Vec<f64>>> = match &roll.states_out {
            Some(st) => Some(st.flatten_from(1)?.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?),
            None => None,
        };
        for (i, v) in chunk.iter().enumerate() {
            let frames = (0..horizon)
                .map(|t| {
                    let gt = v.seg.index_axis(Axis(0), n + t).to_owned();
                    FrameScores::compute(&segs[i * horizon + t], &gt)
                })
                .collect::<Result<Vec<_>>>()?;
            let mae = match &states {
                Some(st) => {
                    let k = v.states[0].len();
                    let pred: Vec<Vec<[f64; 6]>> = (0..horizon)
                        .map(|t| {
                            (0..k)
                                .map(|j| {
                                    let off = (t * s + j) * 6;
                                    let mut r = [0.0; 6];
                                    r.copy_from_slice(&st[i][off..off + 6]);
                                    r
                                })
                                .collect()
                        })
                        .collect();
                    Some(state_mae(&pred, &v.states[n..n + horizon])?)
                }
                None => None,
            };
            if example.is_none() {
                example = Some(segs[i * horizon..(i + 1) * horizon].to_vec());
            }
            out.push(VideoScores {
                id: v.id,
                frames,
                state_mae: mae,
            });
        }
    }
    Ok(SeedEvaluation {
        seed,
        videos: out,
        example,
    })
}

/// Scores the encoder itself on the same frames, decoding its own latents
/// of the ground-truth frames (no rollout).
pub fn evaluate_upper_bound(
    frozen: &Savi,
    videos: &[EncodedVideo],
    context_len: usize,
    horizon: usize,
) -> Result<SeedEvaluation> {
    let mut out = Vec::with_capacity(videos.len());
    let mut example = None;
    for v in videos {
        let lat = v.latents.narrow(0, context_len, horizon)?.unsqueeze(0)?;
        let segs = segment_frames(frozen, &lat)?;
        let frames = (0..horizon)
            .map(|t| FrameScores::compute(&segs[t], &v.seg.index_axis(Axis(0), context_len + t).to_owned()))
            .collect::<Result<Vec<_>>>()?;
        if example.is_none() {
            example = Some(segs);
        }
        out.push(VideoScores {
            id: v.id,
            frames,
            state_mae: None,
        });
    }
    Ok(SeedEvaluation {
        seed: 0,
        videos: out,
        example,
    })
}

/// Full-frame backbone segmentation quality (ARI-FG in [0, 1]) over every
/// frame of the given videos.
pub fn backbone_ari_fg(frozen: &Savi, videos: &[EncodedVideo]) -> Result<f64> {
    let mut per_video = Vec::with_capacity(videos.len());
    for v in videos {
        let t = v.frames()?;
        let segs = segment_frames(frozen, &v.latents.unsqueeze(0)?)?;
        let scores = (0..t)
            .map(|i| ari(&segs[i].view(), &v.seg.index_axis(Axis(0), i), true))
            .collect::<Result<Vec<_>>>()?;
        if let Some(m) = mean(scores.into_iter().flatten()) {
            per_video.push(m);
        }
    }
    mean(per_video).ok_or_else(|| Error::Config("no foreground pixels to score".into()))
}
