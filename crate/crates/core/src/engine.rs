//! Differentiable gravitational N-body dynamics.
//!
//! The engine advances positions and velocities with semi-implicit Euler:
//! every substep first updates velocity from the current acceleration, then
//! position from the new velocity. All operations are expressed as tensor
//! ops so the same code path serves data generation (f64, standalone) and
//! the prediction model's training graph (autodiff through `pos`/`vel`).
//!
//! States may carry leading batch dimensions: `pos` and `vel` are
//! `[..., K, 3]`. An optional activity mask `[..., K]` (1 = active body,
//! 0 = parked) removes a body from the pairwise forces and freezes it.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame interval in seconds (four frames per second).
pub const FRAME_INTERVAL: f64 = 0.25;
/// Integration substeps per rendered frame.
pub const SUBSTEPS_PER_FRAME: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineParams {
    pub grav_const: f64,
    pub mass: f64,
    pub sim_dt: f64,
    pub substeps: usize,
    pub softening_eps: f64,
    pub focus_point: [f64; 3],
    pub focus_strength: f64,
    pub xy_limit: f64,
    pub enable_focus_pull: bool,
    pub enable_xy_limit: bool,
    pub dt_factor: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            grav_const: 1.0,
            mass: 1.0,
            sim_dt: FRAME_INTERVAL / SUBSTEPS_PER_FRAME as f64,
            substeps: SUBSTEPS_PER_FRAME,
            softening_eps: 1e-4,
            focus_point: [0.0, 0.0, 0.0],
            focus_strength: 0.05,
            xy_limit: 4.0,
            enable_focus_pull: true,
            enable_xy_limit: true,
            dt_factor: 1.0,
        }
    }
}

impl EngineParams {
    /// Default world with the simulation step scaled by `dt_factor`.
    pub fn inaccurate(dt_factor: f64) -> Self {
        Self {
            dt_factor,
            ..Self::default()
        }
    }

    /// Gravity only: no focus pull, no wall clamping.
    pub fn free_gravity() -> Self {
        Self {
            enable_focus_pull: false,
            enable_xy_limit: false,
            ..Self::default()
        }
    }

    pub fn effective_dt(&self) -> f64 {
        self.sim_dt * self.dt_factor
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grav_const", self.grav_const),
            ("mass", self.mass),
            ("sim_dt", self.sim_dt),
            ("xy_limit", self.xy_limit),
            ("dt_factor", self.dt_factor),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("engine.{key}"), "must be finite and > 0"));
            }
        }
        if self.substeps < 1 {
            return Err(Error::param("engine.substeps", "must be >= 1"));
        }
        if !(self.softening_eps.is_finite() && self.softening_eps >= 0.0) {
            return Err(Error::param("engine.softening_eps", "must be finite and >= 0"));
        }
        if !(self.focus_strength.is_finite() && self.focus_strength >= 0.0) {
            return Err(Error::param("engine.focus_strength", "must be finite and >= 0"));
        }
        if self.focus_point.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("engine.focus_point", "must be finite"));
        }
        Ok(())
    }
}

/// Positions and velocities of K bodies, `[..., K, 3]` each.
#[derive(Debug, Clone)]
pub struct BodyState {
    pub pos: Tensor,
    pub vel: Tensor,
}

impl BodyState {
    pub fn new(pos: Tensor, vel: Tensor) -> Result<Self> {
        if pos.dims() != vel.dims() {
            return Err(Error::InvalidState(format!(
                "pos {:?} and vel {:?} differ in shape",
                pos.dims(),
                vel.dims()
            )));
        }
        let dims = pos.dims();
        if dims.len() < 2 || dims[dims.len() - 1] != 3 {
            return Err(Error::InvalidState(format!("expected [..., K, 3], got {dims:?}")));
        }
        if dims[dims.len() - 2] < 2 {
            return Err(Error::InvalidState("at least two bodies required".into()));
        }
        let state = Self { pos, vel };
        state.check_finite()?;
        Ok(state)
    }

    /// Builds an unbatched f64 state from `[pos ‖ vel]` rows.
    pub fn from_rows(rows: &[[f64; 6]], device: &Device) -> Result<Self> {
        let k = rows.len();
        let pos: Vec<f64> = rows.iter().flat_map(|r| r[..3].to_vec()).collect();
        let vel: Vec<f64> = rows.iter().flat_map(|r| r[3..].to_vec()).collect();
        Self::new(
            Tensor::from_vec(pos, (k, 3), device)?,
            Tensor::from_vec(vel, (k, 3), device)?,
        )
    }

    /// Splits a `[..., K, 6]` tensor into a state.
    pub fn from_packed(packed: &Tensor) -> Result<Self> {
        let pos = packed.narrow(D::Minus1, 0, 3)?;
        let vel = packed.narrow(D::Minus1, 3, 3)?;
        Self::new(pos, vel)
    }

    /// `[..., K, 6]` concatenation of position and velocity.
    pub fn packed(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.pos, &self.vel], D::Minus1)?)
    }

    pub fn to_rows(&self) -> Result<Vec<[f64; 6]>> {
        let packed = self.packed()?.to_dtype(DType::F64)?;
        let flat: Vec<f64> = packed.flatten_all()?.to_vec1()?;
        Ok(flat
            .chunks_exact(6)
            .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
            .collect())
    }

    pub fn num_bodies(&self) -> usize {
        self.pos.dims()[self.pos.rank() - 2]
    }

    fn check_finite(&self) -> Result<()> {
        let total = (self.pos.abs()?.sum_all()? + self.vel.abs()?.sum_all()?)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        if !total.is_finite() {
            return Err(Error::InvalidState("non-finite entries".into()));
        }
        Ok(())
    }
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidState(format!("non-finite {what}")))
    }
}

/// `out[..., i, j, :] = pos[..., j, :] - pos[..., i, :]`.
pub fn pairwise_deltas(pos: &Tensor) -> Result<Tensor> {
    let rank = pos.rank();
    if rank < 2 || pos.dims()[rank - 1] != 3 || pos.dims()[rank - 2] < 2 {
        return Err(Error::InvalidState(format!(
            "expected [..., K>=2, 3], got {:?}",
            pos.dims()
        )));
    }
    ensure_finite(pos, "positions")?;
    let others = pos.unsqueeze(rank - 2)?; // [..., 1, K, 3], indexed by j
    let selves = pos.unsqueeze(rank - 1)?; // [..., K, 1, 3], indexed by i
    Ok(others.broadcast_sub(&selves)?)
}

/// Acceleration of every body: softened pairwise gravity plus the optional
/// linear pull toward the focus point. `active` is `[..., K]`.
pub fn gravitational_accel(
    pos: &Tensor,
    params: &EngineParams,
    active: Option<&Tensor>,
) -> Result<Tensor> {
    let rank = pos.rank();
    let k = pos.dims()[rank - 2];
    let deltas = pairwise_deltas(pos)?;
    let r2 = deltas.sqr()?.sum_keepdim(D::Minus1)?; // [..., K, K, 1]

    if params.softening_eps == 0.0 {
        check_coincident(&r2, k, active)?;
    }

    // Diagonal entries get +1 so the division is finite; their deltas are
    // zero, so self-interaction vanishes.
    let eye = Tensor::eye(k, pos.dtype(), pos.device())?.unsqueeze(2)?;
    let r2 = (r2 + params.softening_eps)?.broadcast_add(&eye)?;
    let inv_r3 = (r2.sqrt()? * &r2)?.recip()?;
    let mut pair = deltas.broadcast_mul(&inv_r3)?;
    if let Some(mask) = active {
        // Zero the pull exerted by inactive sources j.
        let source = mask.to_dtype(pos.dtype())?.unsqueeze(mask.rank() - 1)?.unsqueeze(mask.rank() + 1)?;
        pair = pair.broadcast_mul(&source)?;
    }
    let mut accel = pair
        .sum(D::Minus2)?
        .affine(params.grav_const * params.mass, 0.0)?;

    if params.enable_focus_pull && params.focus_strength > 0.0 {
        let focus = Tensor::new(&params.focus_point, pos.device())?.to_dtype(pos.dtype())?;
        let pull = focus
            .broadcast_sub(pos)?
            .affine(params.focus_strength, 0.0)?;
        accel = (accel + pull)?;
    }
    Ok(accel)
}

fn check_coincident(r2: &Tensor, k: usize, active: Option<&Tensor>) -> Result<()> {
    let r2: Vec<f64> = r2.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mask: Option<Vec<f64>> = match active {
        Some(m) => Some(m.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?),
        None => None,
    };
    for (b, block) in r2.chunks_exact(k * k).enumerate() {
        for i in 0..k {
            for j in (i + 1)..k {
                let live = mask
                    .as_ref()
                    .map(|m| m[b * k + i] != 0.0 && m[b * k + j] != 0.0)
                    .unwrap_or(true);
                if live && block[i * k + j] == 0.0 {
                    return Err(Error::Singularity(i, j));
                }
            }
        }
    }
    Ok(())
}

/// Clamps x/y positions to the limit box and zeroes the velocity component
/// of any axis that touched the wall.
fn apply_xy_limit(pos: &Tensor, vel: &Tensor, limit: f64) -> Result<(Tensor, Tensor)> {
    let pos_xy = pos.narrow(D::Minus1, 0, 2)?;
    let pos_z = pos.narrow(D::Minus1, 2, 1)?;
    let vel_xy = vel.narrow(D::Minus1, 0, 2)?;
    let vel_z = vel.narrow(D::Minus1, 2, 1)?;

    let hi = pos_xy.gt(limit)?;
    let lo = pos_xy.lt(-limit)?;
    let upper = Tensor::full(limit, pos_xy.dims(), pos.device())?.to_dtype(pos.dtype())?;
    let lower = upper.neg()?;
    let clamped = hi.where_cond(&upper, &lo.where_cond(&lower, &pos_xy)?)?;
    let free = (hi + lo)?.eq(0u8)?;
    let zeros = vel_xy.zeros_like()?;
    let vel_xy = free.where_cond(&vel_xy, &zeros)?;

    Ok((
        Tensor::cat(&[&clamped, &pos_z], D::Minus1)?,
        Tensor::cat(&[&vel_xy, &vel_z], D::Minus1)?,
    ))
}

/// Advances the state by one frame (`substeps` semi-implicit Euler updates
/// of size `sim_dt * dt_factor`). Inactive bodies stay frozen.
pub fn dynamics_step(
    state: &BodyState,
    params: &EngineParams,
    active: Option<&Tensor>,
) -> Result<BodyState> {
    state.check_finite()?;
    let dt = params.effective_dt();
    let update_mask = match active {
        Some(m) => Some(m.to_dtype(state.pos.dtype())?.unsqueeze(m.rank())?),
        None => None,
    };
    let mut pos = state.pos.clone();
    let mut vel = state.vel.clone();
    for _ in 0..params.substeps {
        let accel = gravitational_accel(&pos, params, active)?;
        let mut dv = accel.affine(dt, 0.0)?;
        if let Some(m) = &update_mask {
            dv = dv.broadcast_mul(m)?;
        }
        vel = (vel + dv)?;
        let mut dx = vel.affine(dt, 0.0)?;
        if let Some(m) = &update_mask {
            dx = dx.broadcast_mul(m)?;
        }
        pos = (pos + dx)?;
        if params.enable_xy_limit {
            (pos, vel) = apply_xy_limit(&pos, &vel, params.xy_limit)?;
        }
    }
    Ok(BodyState { pos, vel })
}

/// Trajectory of `frames` consecutive frames, `[frames, ..., K, 6]`; entry
/// `t` is the state after `t + 1` applications of [`dynamics_step`].
pub fn rollout_states(
    state0: &BodyState,
    params: &EngineParams,
    frames: usize,
    active: Option<&Tensor>,
) -> Result<Tensor> {
    if frames < 1 {
        return Err(Error::param("frames", "must be >= 1"));
    }
    let mut state = state0.clone();
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        state = dynamics_step(&state, params, active)?;
        out.push(state.packed()?);
    }
    Ok(Tensor::stack(&out, 0)?)
}
