//! Autoregressive latent prediction on top of the frozen encoder.
//!
//! The `ours` family maps each slot latent into a dynamics half `z_d` and an
//! appearance half `z_g`. The dynamics half is read out as a physical state,
//! advanced by the gravity engine and embedded back, while a transformer over
//! the context predicts a correction for `z_d` and the next `z_g`. The two
//! `z_d` estimates are averaged and decoded into the encoder's latent space.
//! `slotformer` is the same transformer applied to the raw latents.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::engine::{dynamics_step, BodyState, EngineParams};
use crate::error::{Error, Result};
use crate::nn::{linear, sinusoidal_encoding, Mlp, TransformerEncoder};
use crate::params::{dtype_from_str, ParamStore};

/// Physical state of slots that carry no object: parked on the camera axis,
/// at rest, and excluded from all forces.
pub const DUMMY_STATE: [f64; 6] = [0.0, 0.0, 10.0, 0.0, 0.0, 0.0];

pub const STATE_DIM: usize = 6;

/// Default for [`RolloutConfig::engine_grad_cap`].
pub const DEFAULT_ENGINE_GRAD_CAP: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ours,
    OursPure,
    OursSingle,
    OursInaccurate,
    Slotformer,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Ours,
        Variant::OursPure,
        Variant::OursSingle,
        Variant::OursInaccurate,
        Variant::Slotformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::OursPure => "ours_pure",
            Variant::OursSingle => "ours_single",
            Variant::OursInaccurate => "ours_inaccurate",
            Variant::Slotformer => "slotformer",
        }
    }

    /// Display name used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Ours => "Ours",
            Variant::OursPure => "Ours-Pure",
            Variant::OursSingle => "Ours-Single",
            Variant::OursInaccurate => "Ours-Inaccurate",
            Variant::Slotformer => "SlotFormer",
        }
    }

    pub fn uses_engine(self) -> bool {
        self != Variant::Slotformer
    }

    pub fn uses_predictor(self) -> bool {
        self != Variant::OursPure
    }

    /// Whether latents are split into dynamics and appearance halves.
    pub fn split_latent(self) -> bool {
        matches!(self, Variant::Ours | Variant::OursPure | Variant::OursInaccurate)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::param(
                    "variant",
                    format!(
                        "`{s}` is not one of ours, ours_pure, ours_single, ours_inaccurate, slotformer"
                    ),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerSpec {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 8,
            width: 256,
            ffn_width: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub variant: Variant,
    pub context_len: usize,
    pub train_horizon: usize,
    pub eval_horizon: usize,
    pub state_dim: usize,
    pub num_slots: usize,
    pub slot_dim: usize,
    /// Hidden width of the latent state encoder and decoder.
    pub hidden: usize,
    pub transformer: TransformerSpec,
    pub engine: EngineParams,
    /// Bound on the L2 norm of the gradient that flows back out of each
    /// engine call into the readout and earlier steps; `None` leaves the
    /// engine gradient untouched.
    pub engine_grad_cap: Option<f64>,
    pub dtype: String,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Ours, 64)
    }
}

impl RolloutConfig {
    /// Defaults for `variant` over slots of width `slot_dim`. The inaccurate
    /// variant simulates with twice the true time step.
    pub fn for_variant(variant: Variant, slot_dim: usize) -> Self {
        let engine = match variant {
            Variant::OursInaccurate => EngineParams::inaccurate(2.0),
            _ => EngineParams::default(),
        };
        Self {
            variant,
            context_len: 6,
            train_horizon: 12,
            eval_horizon: 24,
            state_dim: STATE_DIM,
            num_slots: 6,
            slot_dim,
            hidden: 128,
            transformer: TransformerSpec::default(),
            engine,
            engine_grad_cap: Some(DEFAULT_ENGINE_GRAD_CAP),
            dtype: "f32".into(),
        }
    }

    pub fn dtype(&self) -> Result<DType> {
        dtype_from_str(&self.dtype)
    }

    /// Width of the latent the engine reads from and writes to.
    pub fn dynamics_width(&self) -> usize {
        if self.variant.split_latent() {
            self.slot_dim / 2
        } else {
            self.slot_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, c: String| Err(Error::param(format!("rollout.{k}"), c));
        if self.slot_dim == 0 || self.slot_dim % 2 != 0 {
            return bad("slot_dim", "must be even and > 0".into());
        }
        if self.state_dim != STATE_DIM {
            return bad("state_dim", format!("must be {STATE_DIM}"));
        }
        if self.context_len == 0 || self.num_slots == 0 || self.hidden == 0 {
            return bad("context_len", "context_len, num_slots and hidden must be >= 1".into());
        }
        if self.train_horizon == 0 || self.eval_horizon == 0 {
            return bad("train_horizon", "horizons must be >= 1".into());
        }
        let t = &self.transformer;
        if t.layers == 0 || t.heads == 0 || t.width % t.heads != 0 || t.ffn_width == 0 {
            return bad(
                "transformer",
                "needs layers >= 1 and heads dividing width".into(),
            );
        }
        if self.variant.uses_engine() {
            self.engine.validate()?;
            let inaccurate = self.variant == Variant::OursInaccurate;
            if inaccurate && self.engine.dt_factor == 1.0 {
                return bad(
                    "engine.dt_factor",
                    "ours_inaccurate needs a dt_factor other than 1".into(),
                );
            }
            if !inaccurate && self.engine.dt_factor != 1.0 {
                return bad(
                    "engine.dt_factor",
                    format!("{} simulates the true time step; use ours_inaccurate", self.variant),
                );
            }
        }
        if let Some(c) = self.engine_grad_cap {
            if !(c > 0.0 && c.is_finite()) {
                return bad("engine_grad_cap", "must be positive and finite".into());
            }
        }
        self.dtype()?;
        Ok(())
    }
}

/// Dynamics and appearance halves, `[..., S, D/2]` each.
#[derive(Debug, Clone)]
pub struct LatentSplit {
    pub z_d: Tensor,
    pub z_g: Tensor,
}

#[derive(Debug, Clone)]
pub struct ExplicitDynamics {
    /// Embedded engine output, `[B, S, w]`.
    pub z_d_exp: Tensor,
    /// Engine input, `[B, S, 6]` (f64).
    pub state_in: Tensor,
    /// Engine output, `[B, S, 6]` (f64).
    pub state_out: Tensor,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Predicted latent, `[B, S, D]`.
    pub z_next: Tensor,
    pub engine: Option<ExplicitDynamics>,
}

#[derive(Debug, Clone)]
pub struct RolloutOutput {
    /// `[B, horizon, S, D]`.
    pub latents: Tensor,
    /// Engine inputs per step, `[B, horizon, S, 6]`.
    pub states_in: Option<Tensor>,
    /// Engine outputs per step, `[B, horizon, S, 6]`: the predicted
    /// physical trajectory.
    pub states_out: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct Predictor {
    input: Linear,
    encoder: TransformerEncoder,
    output: Linear,
}

#[derive(Debug, Clone)]
pub struct RolloutModel {
    config: RolloutConfig,
    store: ParamStore,
    dtype: DType,
    device: Device,
    state_enc: Option<Mlp>,
    state_dec: Option<Mlp>,
    readout: Option<Linear>,
    embed: Option<Linear>,
    predictor: Option<Predictor>,
    engine_calls: Arc<AtomicUsize>,
}

impl RolloutModel {
    pub fn new(config: RolloutConfig, store: ParamStore, device: &Device) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype()?;
        let vb = store.var_builder(dtype, device);
        let v = config.variant;
        let d = config.slot_dim;
        let w = config.dynamics_width();
        let (state_enc, state_dec) = if v.split_latent() {
            (
                Some(Mlp::new(d, config.hidden, d, vb.pp("state_enc"))?),
                Some(Mlp::new(d, config.hidden, d, vb.pp("state_dec"))?),
            )
        } else {
            (None, None)
        };
        let (readout, embed) = if v.uses_engine() {
            (
                Some(linear(w, STATE_DIM, vb.pp("readout"))?),
                Some(linear(STATE_DIM, w, vb.pp("embed"))?),
            )
        } else {
            (None, None)
        };
        let predictor = if v.uses_predictor() {
            let t = &config.transformer;
            Some(Predictor {
                input: linear(d, t.width, vb.pp("predictor.in"))?,
                encoder: TransformerEncoder::new(
                    t.width,
                    t.heads,
                    t.ffn_width,
                    t.layers,
                    vb.pp("predictor.transformer"),
                )?,
                output: linear(t.width, d, vb.pp("predictor.out"))?,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            dtype,
            device: device.clone(),
            state_enc,
            state_dec,
            readout,
            embed,
            predictor,
            engine_calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn config(&self) -> &RolloutConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Number of `dynamics_step` evaluations since construction or the last
    /// reset.
    pub fn engine_calls(&self) -> usize {
        self.engine_calls.load(Ordering::SeqCst)
    }

    pub fn reset_engine_calls(&self) {
        self.engine_calls.store(0, Ordering::SeqCst);
    }

    fn check_width(&self, t: &Tensor, expected: usize, field: &str) -> Result<()> {
        let got = t.dim(D::Minus1)?;
        if got != expected {
            return Err(Error::ShapeMismatch {
                field: field.into(),
                detail: format!("last dimension {got}, expected {expected}"),
            });
        }
        Ok(())
    }

    /// Per-slot latent state encoder, split into equal halves.
    pub fn state_encode(&self, z: &Tensor) -> Result<LatentSplit> {
        let enc = self
            .state_enc
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no latent state encoder", self.variant())))?;
        self.check_width(z, self.config.slot_dim, "z")?;
        let h = enc.forward(&z.to_dtype(self.dtype)?.contiguous()?)?;
        let half = self.config.slot_dim / 2;
        Ok(LatentSplit {
            z_d: h.narrow(D::Minus1, 0, half)?,
            z_g: h.narrow(D::Minus1, half, half)?,
        })
    }

    /// Latent state decoder back into the encoder's space.
    pub fn state_decode(&self, z_d: &Tensor, z_g: &Tensor) -> Result<Tensor> {
        let dec = self
            .state_dec
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no latent state decoder", self.variant())))?;
        let half = self.config.slot_dim / 2;
        self.check_width(z_d, half, "z_d")?;
        self.check_width(z_g, half, "z_g")?;
        Ok(dec.forward(&Tensor::cat(&[z_d, z_g], D::Minus1)?.contiguous()?)?)
    }

    /// Linear readout of a physical state per slot, `[..., 6]`.
    pub fn readout_physical(&self, z_d: &Tensor) -> Result<Tensor> {
        let r = self
            .readout
            .as_ref()
            .ok_or_else(|| Error::Config("slotformer has no state readout".into()))?;
        self.check_width(z_d, self.config.dynamics_width(), "z_d")?;
        Ok(r.forward(&z_d.contiguous()?)?)
    }

    /// Embeds a physical state `[..., 6]` into the dynamics latent.
    pub fn embed_state(&self, state: &Tensor) -> Result<Tensor> {
        let e = self
            .embed
            .as_ref()
            .ok_or_else(|| Error::Config("slotformer has no state embedding".into()))?;
        Ok(e.forward(&state.to_dtype(self.dtype)?.contiguous()?)?)
    }

    /// Advances `state_in` `[B, S, 6]` by one frame in double precision.
    /// Inactive slots are pinned to [`DUMMY_STATE`].
    fn engine_step(&self, state_in: &Tensor, active: Option<&Tensor>) -> Result<Tensor> {
        let mut s = state_in.to_dtype(DType::F64)?;
        if let Some(c) = self.config.engine_grad_cap {
            s = crate::nn::cap_grad_norm(&s, c)?;
        }
        if let Some(m) = active {
            let m = m.to_dtype(DType::F64)?.unsqueeze(D::Minus1)?;
            let dummy = Tensor::new(&DUMMY_STATE, &self.device)?.broadcast_as(s.shape())?;
            s = (s.broadcast_mul(&m)? + dummy.broadcast_mul(&m.affine(-1.0, 1.0)?)?)?;
        }
        let body = BodyState::from_packed(&s)?;
        self.engine_calls.fetch_add(1, Ordering::SeqCst);
        dynamics_step(&body, &self.config.engine, active)?.packed()
    }

    /// Engine branch: substitutes `state_override` (the ground-truth state
    /// at the first predicted frame) for the readout when given.
    pub fn explicit_dynamics(
        &self,
        z_d_context: &Tensor,
        state_override: Option<&Tensor>,
        active: Option<&Tensor>,
    ) -> Result<ExplicitDynamics> {
        let state_in = match state_override {
            Some(s) => s.to_dtype(DType::F64)?,
            None => {
                let n = z_d_context.dim(1)?;
                let last = z_d_context.narrow(1, n - 1, 1)?.squeeze(1)?;
                self.readout_physical(&last)?.to_dtype(DType::F64)?
            }
        };
        let state_out = self.engine_step(&state_in, active)?;
        let z_d_exp = self.embed_state(&state_out)?;
        Ok(ExplicitDynamics {
            z_d_exp,
            state_in,
            state_out,
        })
    }

    /// Transformer over `N × S` tokens of width D; returns the last frame's
    /// `S` outputs `[B, S, D]`.
    fn predict_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let p = self
            .predictor
            .as_ref()
            .ok_or_else(|| Error::Config("ours_pure has no joint predictor".into()))?;
        let (b, n, s, d) = tokens.dims4()?;
        self.check_width(tokens, self.config.slot_dim, "tokens")?;
        let x = p.input.forward(&tokens.to_dtype(self.dtype)?.contiguous()?)?;
        let width = self.config.transformer.width;
        let pe = sinusoidal_encoding(n, width, self.dtype, &self.device)?.reshape((1, n, 1, width))?;
        let x = x.broadcast_add(&pe)?.reshape((b, n * s, width))?;
        let y = p.encoder.forward(&x)?;
        let last = y.narrow(1, (n - 1) * s, s)?;
        let out = p.output.forward(&last.contiguous()?)?;
        debug_assert_eq!(out.dims(), &[b, s, d]);
        Ok(out)
    }

    /// Joint predictor over the split context; returns `(z_d_cor, z_g_next)`.
    pub fn joint_predictor(&self, z_d_context: &Tensor, z_g_context: &Tensor) -> Result<(Tensor, Tensor)> {
        let half = self.config.slot_dim / 2;
        self.check_width(z_d_context, half, "z_d")?;
        self.check_width(z_g_context, half, "z_g")?;
        let out = self.predict_tokens(&Tensor::cat(&[z_d_context, z_g_context], D::Minus1)?)?;
        Ok((out.narrow(D::Minus1, 0, half)?, out.narrow(D::Minus1, half, half)?))
    }

    /// One predicted frame from context `[B, N, S, D]`.
    pub fn predict_step(
        &self,
        context: &Tensor,
        state_override: Option<&Tensor>,
        active: Option<&Tensor>,
    ) -> Result<StepOutput> {
        let (_, n, s, d) = context.dims4()?;
        if s != self.config.num_slots || d != self.config.slot_dim || n == 0 {
            return Err(Error::ShapeMismatch {
                field: "context".into(),
                detail: format!(
                    "got {:?}, expected [B, N>0, {}, {}]",
                    context.dims(),
                    self.config.num_slots,
                    self.config.slot_dim
                ),
            });
        }
        let context = context.to_dtype(self.dtype)?.contiguous()?;
        match self.variant() {
            Variant::Slotformer => Ok(StepOutput {
                z_next: self.predict_tokens(&context)?,
                engine: None,
            }),
            Variant::OursSingle => {
                let exp = self.explicit_dynamics(&context, state_override, active)?;
                let cor = self.predict_tokens(&context)?;
                Ok(StepOutput {
                    z_next: fuse(&exp.z_d_exp, &cor)?,
                    engine: Some(exp),
                })
            }
            Variant::OursPure => {
                let split = self.state_encode(&context)?;
                let exp = self.explicit_dynamics(&split.z_d, state_override, active)?;
                let z_g_next = split.z_g.narrow(1, n - 1, 1)?.squeeze(1)?;
                Ok(StepOutput {
                    z_next: self.state_decode(&exp.z_d_exp, &z_g_next)?,
                    engine: Some(exp),
                })
            }
            Variant::Ours | Variant::OursInaccurate => {
                let split = self.state_encode(&context)?;
                let exp = self.explicit_dynamics(&split.z_d, state_override, active)?;
                let (z_d_cor, z_g_next) = self.joint_predictor(&split.z_d, &split.z_g)?;
                let z_d_next = fuse(&exp.z_d_exp, &z_d_cor)?;
                Ok(StepOutput {
                    z_next: self.state_decode(&z_d_next, &z_g_next)?,
                    engine: Some(exp),
                })
            }
        }
    }

    /// Sliding-window autoregression. `gt_state` `[B, S, 6]` replaces the
    /// engine input at the first step only. In `ours_pure` the engine output
    /// is carried to the next step's input instead of being read out again.
    pub fn rollout(
        &self,
        context: &Tensor,
        horizon: usize,
        gt_state: Option<&Tensor>,
        active: Option<&Tensor>,
    ) -> Result<RolloutOutput> {
        if horizon == 0 {
            return Err(Error::param("horizon", "must be >= 1"));
        }
        let n = self.config.context_len;
        let given = context.dim(1)?;
        if given < n {
            return Err(Error::ShapeMismatch {
                field: "context".into(),
                detail: format!("{given} frames, need {n}"),
            });
        }
        let mut window = context.narrow(1, given - n, n)?.to_dtype(self.dtype)?;
        let mut carried = gt_state.cloned();
        let mut latents = Vec::with_capacity(horizon);
        let mut states_in = Vec::new();
        let mut states_out = Vec::new();
        for step in 0..horizon {
            let over = if step == 0 || self.variant() == Variant::OursPure {
                carried.as_ref()
            } else {
                None
            };
            let out = self.predict_step(&window, over, active)?;
            if let Some(e) = &out.engine {
                states_in.push(e.state_in.clone());
                states_out.push(e.state_out.clone());
                carried = Some(e.state_out.clone());
            }
            let z = out.z_next;
            window = Tensor::cat(&[&window.narrow(1, 1, n - 1)?, &z.unsqueeze(1)?], 1)?;
            latents.push(z);
        }
        let stack = |v: Vec<Tensor>| -> Result<Option<Tensor>> {
            if v.is_empty() {
                Ok(None)
            } else {
                Ok(Some(Tensor::stack(&v, 1)?))
            }
        };
        Ok(RolloutOutput {
            latents: Tensor::stack(&latents, 1)?,
            states_in: stack(states_in)?,
            states_out: stack(states_out)?,
        })
    }
}

/// Fusion of the explicit and corrected dynamics latents: their mean.
pub fn fuse(z_exp: &Tensor, z_cor: &Tensor) -> Result<Tensor> {
    if z_exp.dims() != z_cor.dims() {
        return Err(Error::ShapeMismatch {
            field: "fuse".into(),
            detail: format!("{:?} vs {:?}", z_exp.dims(), z_cor.dims()),
        });
    }
    Ok(((z_exp + z_cor)? * 0.5)?)
}

/// Ground-truth states `[B, S, 6]` and activity mask `[B, S]` for batches of
/// per-object rows; slots beyond each item's objects get [`DUMMY_STATE`].
pub fn pad_states(rows: &[Vec<[f64; 6]>], num_slots: usize, device: &Device) -> Result<(Tensor, Tensor)> {
    let mut data = Vec::with_capacity(rows.len() * num_slots * 6);
    let mut mask = Vec::with_capacity(rows.len() * num_slots);
    for item in rows {
        if item.len() > num_slots {
            return Err(Error::Capacity {
                objects: item.len(),
                slots: num_slots,
            });
        }
        for k in 0..num_slots {
            match item.get(k) {
                Some(r) => {
                    data.extend_from_slice(r);
                    mask.push(1.0);
                }
                None => {
                    data.extend_from_slice(&DUMMY_STATE);
                    mask.push(0.0);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(data, (rows.len(), num_slots, 6), device)?,
        Tensor::from_vec(mask, (rows.len(), num_slots), device)?,
    ))
}

pub const PARAMS_FILE: &str = "rollout.safetensors";
pub const META_FILE: &str = "rollout.json";

/// Training facts recorded alongside a prediction checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub encoder_hash: Option<String>,
    pub steps: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutCheckpointMeta {
    pub kind: String,
    pub config: RolloutConfig,
    pub param_hash: String,
    pub num_params: usize,
    pub training: TrainingSummary,
}

pub fn save_checkpoint(
    model: &RolloutModel,
    training: &TrainingSummary,
    dir: &Path,
) -> Result<RolloutCheckpointMeta> {
    std::fs::create_dir_all(dir)?;
    model.store().save(dir.join(PARAMS_FILE))?;
    let meta = RolloutCheckpointMeta {
        kind: "rollout".into(),
        config: model.config().clone(),
        param_hash: model.store().hash()?,
        num_params: model.store().num_params(),
        training: training.clone(),
    };
    crate::scene::dataset::write_atomic(&dir.join(META_FILE), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<RolloutCheckpointMeta> {
    let meta: RolloutCheckpointMeta = serde_json::from_slice(&std::fs::read(dir.join(META_FILE))?)?;
    if meta.kind != "rollout" {
        return Err(Error::Config(format!(
            "{} is a `{}` checkpoint, not a prediction model",
            dir.display(),
            meta.kind
        )));
    }
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path, device: &Device) -> Result<RolloutModel> {
    let meta = read_checkpoint_meta(dir)?;
    let store = ParamStore::load(dir.join(PARAMS_FILE), false, device)?;
    if store.hash()? != meta.param_hash {
        return Err(Error::Config(format!("parameter hash mismatch in {}", dir.display())));
    }
    RolloutModel::new(meta.config, store, device)
}
