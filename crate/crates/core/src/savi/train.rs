use std::path::Path;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{flow_to_tensor, frames_to_tensor, EncoderConfig, Savi};
use crate::error::{Error, Result};
use crate::nn::mse;
use crate::optim::{write_curve_csv, Adam, CurveRow, EarlyStopping, OptimConfig, Patience};
use crate::scene::{Dataset, SceneSample};

/// Windows of the first `context_len` frames with their flow targets.
#[derive(Debug, Clone)]
pub struct FlowWindows {
    frames: Vec<Tensor>,
    flows: Vec<Tensor>,
    boxes: Vec<Vec<[f64; 4]>>,
}

impl FlowWindows {
    pub fn from_samples(samples: &[SceneSample], config: &EncoderConfig, device: &Device) -> Result<Self> {
        let t = config.context_len;
        let dtype = config.dtype()?;
        let mut out = Self {
            frames: Vec::with_capacity(samples.len()),
            flows: Vec::with_capacity(samples.len()),
            boxes: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            let (len, h, w, _) = s.frames.dim();
            if len < t || h != config.height || w != config.width {
                return Err(Error::ShapeMismatch {
                    field: "frames".into(),
                    detail: format!(
                        "sample {} is {len}x{h}x{w}, encoder needs >= {t} frames of {}x{}",
                        s.index, config.height, config.width
                    ),
                });
            }
            let fr = s.frames.slice(ndarray::s![..t, .., .., ..]);
            let fl = s.flow.slice(ndarray::s![..t, .., .., ..]);
            out.frames.push(frames_to_tensor(&fr, dtype, device)?);
            out.flows.push(flow_to_tensor(&fl, dtype, device)?);
            out.boxes.push(
                s.bboxes
                    .rows()
                    .into_iter()
                    .map(|r| [r[0], r[1], r[2], r[3]])
                    .collect(),
            );
        }
        Ok(out)
    }

    pub fn load(dataset: &Dataset, ids: &[u64], config: &EncoderConfig, device: &Device) -> Result<Self> {
        let samples = ids.iter().map(|&id| dataset.load(id)).collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples, config, device)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `([B, T, 3, H, W], [B, T, H, W, 2], boxes)` for the given indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Vec<Vec<[f64; 4]>>)> {
        let frames: Vec<_> = idx.iter().map(|&i| self.frames[i].clone()).collect();
        let flows: Vec<_> = idx.iter().map(|&i| self.flows[i].clone()).collect();
        let boxes = idx.iter().map(|&i| self.boxes[i].clone()).collect();
        Ok((Tensor::stack(&frames, 0)?, Tensor::stack(&flows, 0)?, boxes))
    }
}

/// Mean squared flow-reconstruction error over all frames of the window.
pub fn flow_loss(model: &Savi, frames: &Tensor, flows: &Tensor, boxes: &[Vec<[f64; 4]>]) -> Result<Tensor> {
    let t = frames.dim(1)?;
    let mut prior = model.init_slots_from_bboxes(boxes)?;
    let mut total: Option<Tensor> = None;
    for i in 0..t {
        let enc = model.encode_frame(&frames.narrow(1, i, 1)?.squeeze(1)?, &prior)?;
        let recon = model.decode_slots(&enc.slots)?.flow;
        let target = flows.narrow(1, i, 1)?.squeeze(1)?;
        let l = mse(&recon, &target)?;
        total = Some(match total {
            Some(acc) => (acc + l)?,
            None => l,
        });
        prior = enc.next_prior;
    }
    Ok((total.expect("window has frames") / t as f64)?)
}

/// Mean flow loss over a whole set, in batches, without parameter updates.
pub fn evaluate_flow_loss(model: &Savi, data: &FlowWindows, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (f, fl, b) = data.batch(chunk)?;
        let l = flow_loss(model, &f.detach(), &fl, &b)?.detach();
        sum += l.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
    }
    Ok(sum / data.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaviTrainReport {
    pub steps: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub curve: Vec<CurveRow>,
}

/// Trains `model` on flow reconstruction and returns a frozen copy holding
/// the parameters with the best validation loss.
pub fn train_savi(
    model: &Savi,
    train: &FlowWindows,
    val: &FlowWindows,
    optim: &OptimConfig,
    curve_path: Option<&Path>,
) -> Result<(Savi, SaviTrainReport)> {
    optim.validate("savi_optim")?;
    if model.is_frozen() {
        return Err(Error::Config("cannot train a frozen encoder".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut adam = Adam::new(model.store().vars(), optim.lr, optim.grad_clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut stopper = EarlyStopping::new(optim.patience);
    let mut best = model.store().snapshot()?;
    let mut curve = Vec::new();
    let mut stopped_early = false;

    for step in 1..=optim.max_steps {
        let mut idx = Vec::with_capacity(optim.batch_size);
        while idx.len() < optim.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (f, fl, b) = train.batch(&idx)?;
        let loss = flow_loss(model, &f, &fl, &b)?;
        let stats = adam.step(&loss)?;
        let mut row = CurveRow {
            step,
            train_loss: stats.loss,
            grad_norm: stats.grad_norm,
            val_loss: None,
        };
        let last = step == optim.max_steps;
        if step % optim.eval_every == 0 || last {
            let v = evaluate_flow_loss(model, val, optim.batch_size)?;
            row.val_loss = Some(v);
            log::info!("savi step {step}: train {:.6} val {v:.6}", stats.loss);
            match stopper.update(v) {
                Patience::Improved => best = model.store().snapshot()?,
                Patience::Waiting => {}
                Patience::Exhausted => stopped_early = true,
            }
        }
        curve.push(row);
        if stopped_early {
            break;
        }
    }
    model.store().restore(&best)?;
    if let Some(p) = curve_path {
        write_curve_csv(&curve, p)?;
    }
    let report = SaviTrainReport {
        steps: adam.steps(),
        best_val_loss: stopper.best(),
        stopped_early,
        curve,
    };
    Ok((model.frozen()?, report))
}
