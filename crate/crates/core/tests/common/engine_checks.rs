use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotphys::engine::{dynamics_step, BodyState, EngineParams};

use super::listing1::Vec3;

fn cpu() -> Device {
    Device::Cpu
}

/// K bodies spread over a 5×5×3 box, at least 0.8 apart, with O(1) speeds.
pub fn random_bodies(rng: &mut ChaCha8Rng, k: usize) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut pos: Vec<Vec3> = Vec::new();
    while pos.len() < k {
        let p = [
            rng.random_range(-2.5..2.5),
            rng.random_range(-2.5..2.5),
            rng.random_range(-1.5..1.5),
        ];
        if pos.iter().all(|q| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>() > 0.64) {
            pos.push(p);
        }
    }
    let vel = (0..k)
        .map(|_| [0; 3].map(|_| rng.random_range(-0.8..0.8)))
        .collect();
    (pos, vel)
}

pub fn state(pos: &[Vec3], vel: &[Vec3]) -> BodyState {
    let rows: Vec<[f64; 6]> = pos
        .iter()
        .zip(vel)
        .map(|(p, v)| [p[0], p[1], p[2], v[0], v[1], v[2]])
        .collect();
    BodyState::from_rows(&rows, &cpu()).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec3> {
    t.to_vec2::<f64>().unwrap().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

pub fn max_diff(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).abs()))
        .fold(0.0, f64::max)
}

/// Jacobian of the packed output `[K, 6]` with respect to packed input.
pub fn autodiff_jacobian(s: &[[f64; 6]], params: &EngineParams) -> Vec<Vec<f64>> {
    let k = s.len();
    let flat: Vec<f64> = s.iter().flatten().copied().collect();
    let x = Var::from_tensor(&Tensor::from_vec(flat, (k, 6), &cpu()).unwrap()).unwrap();
    let out = dynamics_step(&BodyState::from_packed(x.as_tensor()).unwrap(), params, None)
        .unwrap()
        .packed()
        .unwrap()
        .flatten_all()
        .unwrap();
    (0..6 * k)
        .map(|o| {
            let g = out.get(o).unwrap().backward().unwrap();
            g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap()
        })
        .collect()
}

pub fn packed_step(s: &[[f64; 6]], params: &EngineParams) -> Vec<f64> {
    let pos: Vec<Vec3> = s.iter().map(|r| [r[0], r[1], r[2]]).collect();
    let vel: Vec<Vec3> = s.iter().map(|r| [r[3], r[4], r[5]]).collect();
    let out = dynamics_step(&state(&pos, &vel), params, None).unwrap();
    out.packed().unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

/// Largest relative error of autodiff against central differences; entries
/// below `floor` in magnitude are compared absolutely against it.
pub fn gradient_check(seed: u64, eps: f64, floor: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos, vel) = random_bodies(&mut rng, 3);
    let s: Vec<[f64; 6]> = pos
        .iter()
        .zip(&vel)
        .map(|(p, v)| [p[0], p[1], p[2], v[0], v[1], v[2]])
        .collect();
    // Larger steps than the default make the cross terms clearly non-zero.
    let params = EngineParams {
        substeps: 3,
        sim_dt: 0.05,
        enable_xy_limit: false,
        ..EngineParams::default()
    };
    let jac = autodiff_jacobian(&s, &params);
    let mut worst: f64 = 0.0;
    for input in 0..18 {
        let mut plus = s.clone();
        let mut minus = s.clone();
        plus[input / 6][input % 6] += eps;
        minus[input / 6][input % 6] -= eps;
        let (fp, fm) = (packed_step(&plus, &params), packed_step(&minus, &params));
        for out in 0..18 {
            let fd = (fp[out] - fm[out]) / (2.0 * eps);
            let ad = jac[out][input];
            worst = worst.max((ad - fd).abs() / ad.abs().max(fd.abs()).max(floor));
        }
    }
    worst
}
