//! Training of the prediction models on latents of the frozen encoder.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mse;
use crate::optim::{
    write_curve_csv, Adam, CurveRow, EarlyStopping, OptimConfig, Patience,
};
use crate::params::ParamStore;
use crate::rollout::{pad_states, save_checkpoint, RolloutConfig, RolloutModel, TrainingSummary};
use crate::savi::{flow_to_tensor, frames_to_tensor, Savi};
use crate::scene::{Dataset, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    /// Weight of an extra flow loss on decoded predictions; 0 disables it.
    pub decoded_flow_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            decoded_flow_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip_norm: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn from_optim(o: &OptimConfig) -> Self {
        Self {
            batch_size: o.batch_size,
            lr: o.lr,
            grad_clip_norm: o.grad_clip_norm,
            max_steps: o.max_steps,
            eval_every: o.eval_every,
            patience: o.patience,
            seed: o.seed,
            loss: LossSpec::default(),
        }
    }

    pub fn paper() -> Self {
        Self::from_optim(&OptimConfig::paper())
    }

    pub fn desk() -> Self {
        Self::from_optim(&OptimConfig::desk())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            grad_clip_norm: self.grad_clip_norm,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim().validate("train")?;
        let w = self.loss.decoded_flow_weight;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::param("train.loss.decoded_flow_weight", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// A video encoded once by the frozen backbone.
#[derive(Debug, Clone)]
pub struct EncodedVideo {
    pub id: u64,
    /// `[T, S, D]`.
    pub latents: Tensor,
    /// Ground-truth states per frame, one row per object.
    pub states: Vec<Vec<[f64; 6]>>,
    /// Ground-truth segmentation `[T, H, W]` (0 = background).
    pub seg: ndarray::Array3<u8>,
    /// Flow targets `[T, H, W, 2]`, kept only when a flow loss needs them.
    pub flow: Option<Tensor>,
}

impl EncodedVideo {
    pub fn frames(&self) -> Result<usize> {
        Ok(self.latents.dim(0)?)
    }

    /// Context of `context_len` frames followed by `horizon` targets.
    pub fn example(&self, context_len: usize, horizon: usize) -> Result<TrainingExample> {
        let need = context_len + horizon;
        let t = self.frames()?;
        if t < need {
            return Err(Error::ShapeMismatch {
                field: "video".into(),
                detail: format!("video {} has {t} frames, need {need}", self.id),
            });
        }
        Ok(TrainingExample {
            id: self.id,
            context: self.latents.narrow(0, 0, context_len)?,
            targets: self.latents.narrow(0, context_len, horizon)?,
            gt_state: self.states[context_len - 1].clone(),
            target_states: self.states[context_len..need].to_vec(),
            target_flow: match &self.flow {
                Some(f) => Some(f.narrow(0, context_len, horizon)?),
                None => None,
            },
        })
    }
}

/// Encodes every frame of `sample` with the frozen backbone.
pub fn encode_sample(frozen: &Savi, sample: &SceneSample, keep_flow: bool) -> Result<EncodedVideo> {
    if !frozen.is_frozen() {
        return Err(Error::Config("latents must come from a frozen encoder".into()));
    }
    let device = frozen.device();
    let frames = frames_to_tensor(&sample.frames.view(), frozen.dtype(), device)?.unsqueeze(0)?;
    let boxes: Vec<[f64; 4]> = sample
        .bboxes
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2], r[3]])
        .collect();
    let latents = frozen.encode_video(&frames, &[boxes])?.squeeze(0)?.detach();
    let states = (0..sample.frames_len()).map(|t| sample.state_rows(t)).collect();
    let flow = if keep_flow {
        Some(flow_to_tensor(&sample.flow.view(), frozen.dtype(), device)?)
    } else {
        None
    };
    Ok(EncodedVideo {
        id: sample.index,
        latents,
        states,
        seg: sample.seg.clone(),
        flow,
    })
}

pub fn encode_dataset(frozen: &Savi, dataset: &Dataset, ids: &[u64], keep_flow: bool) -> Result<Vec<EncodedVideo>> {
    ids.iter()
        .map(|&id| {
            let sample = dataset.load(id)?;
            encode_sample(frozen, &sample, keep_flow)
        })
        .collect()
}

/// Six context latents, the following targets and the ground-truth state of
/// the last context frame.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: u64,
    /// `[N, S, D]`.
    pub context: Tensor,
    /// `[horizon, S, D]`.
    pub targets: Tensor,
    pub gt_state: Vec<[f64; 6]>,
    pub target_states: Vec<Vec<[f64; 6]>>,
    pub target_flow: Option<Tensor>,
}

/// Encodes the first `context_len + horizon` frames of `video` and splits
/// them into context and targets.
pub fn make_training_example(
    video: &SceneSample,
    frozen: &Savi,
    context_len: usize,
    horizon: usize,
) -> Result<TrainingExample> {
    let need = context_len + horizon;
    if video.frames_len() < need {
        return Err(Error::ShapeMismatch {
            field: "video".into(),
            detail: format!("video {} has {} frames, need {need}", video.index, video.frames_len()),
        });
    }
    encode_sample(frozen, video, false)?.example(context_len, horizon)
}

/// A stacked batch of examples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub context: Tensor,
    pub targets: Tensor,
    pub gt_state: Tensor,
    pub active: Tensor,
    pub target_flow: Option<Tensor>,
}

pub fn collate(examples: &[&TrainingExample], num_slots: usize, device: &Device) -> Result<Batch> {
    let context = Tensor::stack(&examples.iter().map(|e| e.context.clone()).collect::<Vec<_>>(), 0)?;
    let targets = Tensor::stack(&examples.iter().map(|e| e.targets.clone()).collect::<Vec<_>>(), 0)?;
    let rows: Vec<_> = examples.iter().map(|e| e.gt_state.clone()).collect();
    let (gt_state, active) = pad_states(&rows, num_slots, device)?;
    let target_flow = if examples.iter().all(|e| e.target_flow.is_some()) && !examples.is_empty() {
        Some(Tensor::stack(
            &examples.iter().map(|e| e.target_flow.clone().expect("checked")).collect::<Vec<_>>(),
            0,
        )?)
    } else {
        None
    };
    Ok(Batch {
        context,
        targets,
        gt_state,
        active,
        target_flow,
    })
}

/// Mean squared error in the backbone's latent space over frames, slots and
/// channels.
pub fn prediction_loss(predicted: &Tensor, target: &Tensor) -> Result<Tensor> {
    mse(predicted, &target.to_dtype(predicted.dtype())?)
}

/// Total training objective and the names of the terms it contains.
pub fn objective(
    model: &RolloutModel,
    frozen: &Savi,
    batch: &Batch,
    loss: &LossSpec,
) -> Result<(Tensor, Vec<&'static str>)> {
    let horizon = batch.targets.dim(1)?;
    let out = model.rollout(&batch.context, horizon, Some(&batch.gt_state), Some(&batch.active))?;
    let mut total = prediction_loss(&out.latents, &batch.targets)?;
    let mut terms = vec!["latent_mse"];
    if loss.decoded_flow_weight > 0.0 {
        let flow = batch
            .target_flow
            .as_ref()
            .ok_or_else(|| Error::Config("decoded flow loss needs flow targets".into()))?;
        let (b, t, s, d) = out.latents.dims4()?;
        let decoded = frozen
            .decode_slots(&out.latents.reshape((b * t, s, d))?.to_dtype(frozen.dtype())?)?
            .flow;
        let target = flow.reshape(decoded.shape())?;
        let term = mse(&decoded, &target)?.to_dtype(total.dtype())?;
        total = (total + (term * loss.decoded_flow_weight)?)?;
        terms.push("decoded_flow_mse");
    }
    Ok((total, terms))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean objective over `examples` in fixed-order batches.
pub fn evaluate_loss(
    model: &RolloutModel,
    frozen: &Savi,
    examples: &[TrainingExample],
    loss: &LossSpec,
    batch_size: usize,
    device: &Device,
) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = collate(&refs, model.config().num_slots, device)?;
        let (l, _) = objective(model, frozen, &batch, loss)?;
        sum += scalar(&l.detach())? * chunk.len() as f64;
    }
    Ok(sum / examples.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RolloutModel,
    pub summary: TrainingSummary,
    pub curve: Vec<CurveRow>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains a fresh model of `rollout_config` on `train`, with early stopping
/// on `val`. With `out_dir`, the best model so far is checkpointed there
/// atomically and the training curve is written as `curve.csv`. A diverging
/// run leaves that last good checkpoint in place and returns the error.
pub fn train_predictor(
    train: &[TrainingExample],
    val: &[TrainingExample],
    frozen: &Savi,
    rollout_config: &RolloutConfig,
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    if !frozen.is_frozen() {
        return Err(Error::Config("the backbone must be frozen before predictor training".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let device = frozen.device().clone();
    let encoder_hash = frozen.store().hash()?;
    let model = RolloutModel::new(
        rollout_config.clone(),
        ParamStore::seeded(train_config.seed),
        &device,
    )?;
    let mut adam = Adam::new(model.store().vars(), train_config.lr, train_config.grad_clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut stopper = EarlyStopping::new(train_config.patience);
    let mut best = model.store().snapshot()?;
    let mut curve = Vec::new();
    let mut summary = TrainingSummary {
        encoder_hash: Some(encoder_hash.clone()),
        ..Default::default()
    };
    let bs = train_config.batch_size.min(train.len());
    let checkpoint = out_dir.map(|d| d.join("model"));

    for step in 1..=train_config.max_steps {
        let mut idx = Vec::with_capacity(bs);
        while idx.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let refs: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
        let batch = collate(&refs, rollout_config.num_slots, &device)?;
        let stats = objective(&model, frozen, &batch, &train_config.loss)
            .and_then(|(l, _)| adam.step(&l));
        let stats = match stats {
            Ok(s) => s,
            Err(e) => {
                if let Some(d) = out_dir {
                    write_curve_csv(&curve, &d.join("curve.csv"))?;
                }
                return Err(e);
            }
        };
        let mut row = CurveRow {
            step,
            train_loss: stats.loss,
            grad_norm: stats.grad_norm,
            val_loss: None,
        };
        let mut stop = false;
        if step % train_config.eval_every == 0 || step == train_config.max_steps {
            let v = evaluate_loss(&model, frozen, val, &train_config.loss, train_config.batch_size, &device)?;
            row.val_loss = Some(v);
            log::info!(
                "{} step {step}: train {:.6} val {v:.6}",
                rollout_config.variant,
                stats.loss
            );
            match stopper.update(v) {
                Patience::Improved => {
                    best = model.store().snapshot()?;
                    summary.steps = step;
                    summary.best_val_loss = Some(v);
                    if let Some(c) = &checkpoint {
                        save_checkpoint(&model, &summary, c)?;
                    }
                }
                Patience::Waiting => {}
                Patience::Exhausted => {
                    stop = true;
                    summary.stopped_early = true;
                }
            }
        }
        curve.push(row);
        if stop {
            break;
        }
    }
    model.store().restore(&best)?;
    if frozen.store().hash()? != encoder_hash {
        return Err(Error::Config("backbone parameters changed during predictor training".into()));
    }
    if let Some(d) = out_dir {
        write_curve_csv(&curve, &d.join("curve.csv"))?;
        if let Some(c) = &checkpoint {
            save_checkpoint(&model, &summary, c)?;
        }
    }
    Ok(TrainOutcome {
        model,
        summary,
        curve,
        checkpoint,
    })
}
