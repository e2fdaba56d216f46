use candle_core::Device;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{compute_flow, label_bbox, render_frame, Camera, Disc, Lighting};
use crate::engine::{rollout_states, BodyState, EngineParams};
use crate::error::{Error, Result};

/// Maximum rejection-sampling attempts per sample.
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Palette {
    pub colors: Vec<[f64; 3]>,
    /// Per-channel uniform jitter applied to the chosen base color.
    pub tint_jitter: f64,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            colors: vec![
                [0.90, 0.25, 0.20],
                [0.20, 0.65, 0.90],
                [0.30, 0.85, 0.35],
                [0.95, 0.80, 0.20],
                [0.75, 0.35, 0.90],
                [0.95, 0.55, 0.15],
                [0.85, 0.85, 0.85],
            ],
            tint_jitter: 0.06,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub num_samples: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub radius_range: [f64; 2],
    /// Half-extents of the box initial positions are drawn from.
    pub spawn_region: [f64; 3],
    pub speed_scale: f64,
    pub palette: Palette,
    pub lighting: Lighting,
    pub camera_distance: f64,
    pub camera_focal: f64,
    pub seed: u64,
    pub engine: EngineParams,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorParams {
    /// Full-size dataset: 10k videos of 32 frames at 64×64.
    pub fn paper() -> Self {
        Self {
            num_samples: 10_000,
            ..Self::desk()
        }
    }

    /// Same geometry as [`GeneratorParams::paper`] with 500 videos.
    pub fn desk() -> Self {
        Self {
            num_samples: 500,
            frames: 32,
            height: 64,
            width: 64,
            k_min: 3,
            k_max: 5,
            radius_range: [0.55, 0.95],
            spawn_region: [2.8, 2.8, 1.5],
            speed_scale: 0.6,
            palette: Palette::default(),
            lighting: Lighting::default(),
            camera_distance: 12.0,
            camera_focal: 1.4,
            seed: 0,
            engine: EngineParams::default(),
        }
    }

    pub fn camera(&self) -> Camera {
        Camera {
            distance: self.camera_distance,
            focal: self.camera_focal,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_min < 2 {
            return Err(Error::param("generator.k_min", "must be >= 2"));
        }
        if self.k_max < self.k_min || self.k_max > 254 {
            return Err(Error::param("generator.k_max", "must be in [k_min, 254]"));
        }
        if !(self.radius_range[0] > 0.0 && self.radius_range[1] >= self.radius_range[0]) {
            return Err(Error::param("generator.radius_range", "must be positive and ordered"));
        }
        if self.frames < 2 || self.height == 0 || self.width == 0 {
            return Err(Error::param("generator.frames", "need frames >= 2 and a non-empty image"));
        }
        if self.palette.colors.is_empty() {
            return Err(Error::param("generator.palette.colors", "must not be empty"));
        }
        if self.spawn_region.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::param("generator.spawn_region", "must be >= 0"));
        }
        if self.camera_distance <= self.spawn_region[2] {
            return Err(Error::param("generator.camera_distance", "must exceed spawn_region z"));
        }
        self.engine.validate()
    }
}

/// Deterministic per-sample stream derived from `(seed, index)`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone)]
pub struct InitialConditions {
    pub state: Vec<[f64; 6]>,
    pub radii: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

/// Draws K, non-overlapping positions, velocities, radii and colors.
pub fn sample_initial_conditions<R: Rng>(
    rng: &mut R,
    params: &GeneratorParams,
) -> Result<InitialConditions> {
    let k = rng.random_range(params.k_min..=params.k_max);
    let radii: Vec<f64> = (0..k)
        .map(|_| rng.random_range(params.radius_range[0]..=params.radius_range[1]))
        .collect();

    let mut positions: Vec<[f64; 3]> = Vec::with_capacity(k);
    let mut attempts = 0usize;
    while positions.len() < k {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Generation(format!(
                "could not place {k} bodies in spawn region {:?} within {MAX_ATTEMPTS} attempts",
                params.spawn_region
            )));
        }
        let s = params.spawn_region;
        let p = [
            rng.random_range(-s[0]..=s[0]),
            rng.random_range(-s[1]..=s[1]),
            rng.random_range(-s[2]..=s[2]),
        ];
        let i = positions.len();
        let ok = positions.iter().enumerate().all(|(j, q)| {
            let d2: f64 = (0..3).map(|c| (p[c] - q[c]).powi(2)).sum();
            d2.sqrt() >= 1.5 * (radii[i] + radii[j])
        });
        if ok {
            positions.push(p);
        }
    }

    let v = params.speed_scale;
    let state = positions
        .iter()
        .map(|p| {
            [
                p[0],
                p[1],
                p[2],
                rng.random_range(-v..=v),
                rng.random_range(-v..=v),
                rng.random_range(-v..=v),
            ]
        })
        .collect();

    let jitter = params.palette.tint_jitter;
    let colors = (0..k)
        .map(|_| {
            let base = params.palette.colors[rng.random_range(0..params.palette.colors.len())];
            let mut c = [0.0; 3];
            for ch in 0..3 {
                let j = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
                c[ch] = (base[ch] + j).clamp(0.0, 1.0);
            }
            c
        })
        .collect();

    Ok(InitialConditions { state, radii, colors })
}

/// One generated video with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub index: u64,
    /// `[T, H, W, 3]` RGB.
    pub frames: Array4<u8>,
    /// `[T, H, W, 2]` pixels/frame, x then y.
    pub flow: Array4<f32>,
    /// `[T, H, W]`, 0 = background, 1..=K objects.
    pub seg: Array3<u8>,
    /// `[T, K, 6]` position ‖ velocity per frame.
    pub states: Array3<f64>,
    /// `[K, 4]` normalized frame-0 boxes `[x_min, y_min, x_max, y_max]`.
    pub bboxes: Array2<f64>,
    pub num_objects: usize,
}

impl SceneSample {
    pub fn frames_len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn state_rows(&self, t: usize) -> Vec<[f64; 6]> {
        let k = self.num_objects;
        (0..k)
            .map(|i| {
                let mut r = [0.0; 6];
                for (c, v) in r.iter_mut().enumerate() {
                    *v = self.states[[t, i, c]];
                }
                r
            })
            .collect()
    }
}

/// Simulates the trajectory for `ic` with the engine (`dt_factor` forced to
/// 1). Returns `[T, K, 6]` rows.
pub fn simulate(ic: &InitialConditions, params: &GeneratorParams) -> Result<Vec<Vec<[f64; 6]>>> {
    let engine = EngineParams {
        dt_factor: 1.0,
        ..params.engine.clone()
    };
    let state = BodyState::from_rows(&ic.state, &Device::Cpu)?;
    let traj = rollout_states(&state, &engine, params.frames, None)?;
    let k = ic.state.len();
    let flat: Vec<f64> = traj.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks_exact(k * 6)
        .map(|frame| {
            frame
                .chunks_exact(6)
                .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
                .collect()
        })
        .collect())
}

fn discs(rows: &[[f64; 6]], ic: &InitialConditions) -> Vec<Disc> {
    rows.iter()
        .zip(ic.radii.iter().zip(&ic.colors))
        .map(|(r, (&radius, &color))| Disc {
            center: [r[0], r[1], r[2]],
            radius,
            color,
        })
        .collect()
}

struct Draw {
    ic: InitialConditions,
    traj: Vec<Vec<[f64; 6]>>,
    first: (Array3<u8>, Array2<u8>),
    boxes: Vec<[f64; 4]>,
}

/// Draws from the `(seed, index)` stream until a scene is accepted: every
/// body stays clear of the camera's near range and is visible in frame 0.
fn draw_scene(index: u64, params: &GeneratorParams) -> Result<Draw> {
    params.validate()?;
    let camera = params.camera();
    let mut rng = sample_rng(params.seed, index);
    let near = 0.5 * params.camera_distance;
    for _ in 0..MAX_ATTEMPTS {
        let ic = sample_initial_conditions(&mut rng, params)?;
        let traj = simulate(&ic, params)?;
        if traj.iter().flatten().any(|r| params.camera_distance - r[2] < near) {
            continue;
        }
        let first = render_frame(&discs(&traj[0], &ic), &camera, &params.lighting);
        let boxes: Option<Vec<[f64; 4]>> = (1..=ic.state.len())
            .map(|l| label_bbox(&first.1, l as u8))
            .collect();
        if let Some(boxes) = boxes {
            return Ok(Draw { ic, traj, first, boxes });
        }
    }
    Err(Error::Generation(format!(
        "sample {index}: no valid scene within {MAX_ATTEMPTS} draws"
    )))
}

/// Generates sample `index`; a pure function of `(params, index)`.
pub fn generate_sample(index: u64, params: &GeneratorParams) -> Result<SceneSample> {
    let Draw { ic, traj, first, boxes } = draw_scene(index, params)?;
    let camera = params.camera();
    let k = ic.state.len();
    let (t_len, h, w) = (params.frames, params.height, params.width);
    let mut frames = Array4::<u8>::zeros((t_len, h, w, 3));
    let mut seg = Array3::<u8>::zeros((t_len, h, w));
    let mut flow = Array4::<f32>::zeros((t_len, h, w, 2));
    let mut states = Array3::<f64>::zeros((t_len, k, 6));

    let mut rendered = Vec::with_capacity(t_len);
    rendered.push(first);
    for rows in &traj[1..] {
        rendered.push(render_frame(&discs(rows, &ic), &camera, &params.lighting));
    }
    let centers = |rows: &[[f64; 6]]| -> Vec<[f64; 3]> { rows.iter().map(|r| [r[0], r[1], r[2]]).collect() };
    for (t, (f, s)) in rendered.iter().enumerate() {
        frames.index_axis_mut(Axis(0), t).assign(f);
        seg.index_axis_mut(Axis(0), t).assign(s);
        for (i, r) in traj[t].iter().enumerate() {
            for c in 0..6 {
                states[[t, i, c]] = r[c];
            }
        }
        if t + 1 < t_len {
            let fl = compute_flow(&centers(&traj[t]), &centers(&traj[t + 1]), s, &camera);
            flow.index_axis_mut(Axis(0), t).assign(&fl);
        }
    }
    let mut bboxes = Array2::<f64>::zeros((k, 4));
    for (i, b) in boxes.iter().enumerate() {
        for c in 0..4 {
            bboxes[[i, c]] = b[c];
        }
    }
    Ok(SceneSample {
        index,
        frames,
        flow,
        seg,
        states,
        bboxes,
        num_objects: k,
    })
}

/// Recovers the pre-roll initial conditions of sample `index` (the state one
/// frame before `states[0]`).
pub fn initial_conditions_for(index: u64, params: &GeneratorParams) -> Result<InitialConditions> {
    Ok(draw_scene(index, params)?.ic)
}
