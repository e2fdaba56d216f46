//! Adam with global-norm gradient clipping, early stopping and training
//! curves shared by both training loops.

use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::grad_norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip_norm: f64,
    pub max_steps: usize,
    /// Steps between validation evaluations.
    pub eval_every: usize,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl OptimConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-4,
            grad_clip_norm: 0.05,
            max_steps: 100_000,
            eval_every: 500,
            patience: 10,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            max_steps: 20_000,
            ..Self::paper()
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let bad = |k: &str, c: &str| Err(Error::param(format!("{section}.{k}"), c));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and > 0");
        }
        if !(self.grad_clip_norm > 0.0 && self.grad_clip_norm.is_finite()) {
            return bad("grad_clip_norm", "must be finite and > 0");
        }
        if self.max_steps == 0 {
            return bad("max_steps", "must be >= 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience", "must be >= 1");
        }
        Ok(())
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norms before and after clipping.
pub fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<(f64, f64)> {
    let pre = grad_norm(grads, vars)?;
    if pre <= max_norm || pre == 0.0 {
        return Ok((pre, pre));
    }
    let scale = max_norm / pre;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            let scaled = g.affine(scale, 0.0)?;
            grads.insert(v.as_tensor(), scaled);
        }
    }
    Ok((pre, grad_norm(grads, vars)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Adam (no weight decay) over a fixed set of variables.
pub struct Adam {
    inner: AdamW,
    vars: Vec<Var>,
    clip: f64,
    steps: usize,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, clip: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            clip,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Backpropagates `loss`, clips and applies one update. A non-finite loss
    /// or gradient aborts without touching the parameters.
    pub fn step(&mut self, loss: &Tensor) -> Result<StepStats> {
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.steps,
                detail: format!("loss is {value}"),
            });
        }
        let mut grads = loss.backward()?;
        let (pre, post) = clip_gradients(&mut grads, &self.vars, self.clip)?;
        if !pre.is_finite() {
            return Err(Error::Divergence {
                step: self.steps,
                detail: format!("gradient norm is {pre}"),
            });
        }
        self.inner.step(&grads)?;
        self.steps += 1;
        Ok(StepStats {
            loss: value,
            grad_norm: pre,
            clipped_norm: post,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Patience {
    Improved,
    Waiting,
    Exhausted,
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn update(&mut self, val: f64) -> Patience {
        if val < self.best {
            self.best = val;
            self.stale = 0;
            Patience::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Patience::Exhausted
            } else {
                Patience::Waiting
            }
        }
    }
}

/// One row of a training curve. `val_loss` is empty between evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub val_loss: Option<f64>,
}

pub fn write_curve_csv(rows: &[CurveRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    crate::scene::dataset::write_atomic(path, &bytes)
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>()?)
}
