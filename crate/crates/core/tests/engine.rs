mod common;

use candle_core::Device;
use common::engine_checks::{gradient_check, max_diff, random_bodies, rows, state};
use common::listing1::{self, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slotphys::engine::{
    dynamics_step, gravitational_accel, pairwise_deltas, rollout_states, BodyState, EngineParams,
};
use slotphys::scene::{generate_sample, GeneratorParams};

fn cpu() -> Device {
    Device::Cpu
}

#[test]
fn deltas_match_double_loop_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (pos, _) = random_bodies(&mut rng, 5);
    let d = pairwise_deltas(&state(&pos, &pos).pos).unwrap();
    let d: Vec<Vec<Vec<f64>>> = d.to_vec3().unwrap();
    for i in 0..5 {
        for j in 0..5 {
            for c in 0..3 {
                assert_eq!(d[i][j][c], pos[j][c] - pos[i][c]);
            }
        }
    }
}

#[test]
fn accel_matches_pairwise_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (pos, vel) = random_bodies(&mut rng, 4);
        let params = EngineParams {
            grav_const: rng.random_range(0.2..3.0),
            mass: rng.random_range(0.5..2.0),
            focus_strength: rng.random_range(0.0..0.3),
            ..EngineParams::default()
        };
        let got = rows(&gravitational_accel(&state(&pos, &vel).pos, &params, None).unwrap());
        assert!(max_diff(&got, &listing1::accel(&pos, &params)) < 1e-12);
    }
}

#[test]
fn one_frame_matches_scalar_integrator() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (pos, vel) = random_bodies(&mut rng, 3);
    let params = EngineParams::default();
    let out = dynamics_step(&state(&pos, &vel), &params, None).unwrap();
    let (p, v) = listing1::dynamics_step(&pos, &vel, &params);
    assert!(max_diff(&rows(&out.pos), &p) < 1e-9);
    assert!(max_diff(&rows(&out.vel), &v) < 1e-9);
}

#[test]
fn autodiff_matches_central_differences() {
    for seed in 0..3 {
        let err = gradient_check(seed, 1e-5, 1e-6);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn momentum_is_conserved_without_pull_or_walls() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (pos, vel) = random_bodies(&mut rng, 4);
    let vel: Vec<Vec3> = vel.iter().map(|v| [v[0] + 0.3, v[1] - 0.2, v[2] + 0.1]).collect();
    let params = EngineParams {
        mass: 1.7,
        ..EngineParams::free_gravity()
    };
    let traj = rollout_states(&state(&pos, &vel), &params, 32, None).unwrap();
    let last = traj.get(31).unwrap().to_vec2::<f64>().unwrap();
    let momentum = |v: &mut dyn Iterator<Item = Vec3>| {
        v.fold([0.0; 3], |acc, v| [0, 1, 2].map(|c| acc[c] + params.mass * v[c]))
    };
    let p0 = momentum(&mut vel.iter().copied());
    let p1 = momentum(&mut last.iter().map(|r| [r[3], r[4], r[5]]));
    let drift = (0..3).map(|c| (p1[c] - p0[c]).powi(2)).sum::<f64>().sqrt();
    let norm = p0.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(drift / norm < 1e-8, "{}", drift / norm);
}

#[test]
fn replays_stored_trajectory_and_diverges_with_wrong_step() {
    let params = GeneratorParams {
        num_samples: 1,
        frames: 32,
        height: 16,
        width: 16,
        ..GeneratorParams::desk()
    };
    let sample = generate_sample(0, &params).unwrap();
    let s0 = BodyState::from_rows(&sample.state_rows(0), &cpu()).unwrap();
    let stored = |t: usize| sample.state_rows(t);
    let replay = |engine: &EngineParams| -> Vec<Vec<Vec<f64>>> {
        rollout_states(&s0, engine, 31, None).unwrap().to_vec3().unwrap()
    };
    let exact = replay(&params.engine);
    let worst = (1..32)
        .flat_map(|t| {
            let e = &exact[t - 1];
            stored(t).into_iter().zip(e.clone()).flat_map(|(a, b)| (0..6).map(move |c| (a[c] - b[c]).abs()))
        })
        .fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");

    let wrong = replay(&EngineParams::inaccurate(2.0));
    let by_frame_8 = (1..=8)
        .flat_map(|t| {
            let e = &wrong[t - 1];
            stored(t).into_iter().zip(e.clone()).flat_map(|(a, b)| (0..6).map(move |c| (a[c] - b[c]).abs()))
        })
        .fold(0.0, f64::max);
    assert!(by_frame_8 > 0.01, "{by_frame_8}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matches_oracle_with_random_switches(seed in 0u64..1_000_000, pull: bool, walls: bool, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pos, vel) = random_bodies(&mut rng, k);
        let params = EngineParams {
            enable_focus_pull: pull,
            enable_xy_limit: walls,
            xy_limit: 2.0,
            ..EngineParams::default()
        };
        let out = dynamics_step(&state(&pos, &vel), &params, None).unwrap();
        let (p, v) = listing1::dynamics_step(&pos, &vel, &params);
        prop_assert!(max_diff(&rows(&out.pos), &p) < 1e-9);
        prop_assert!(max_diff(&rows(&out.vel), &v) < 1e-9);
    }

    #[test]
    fn translation_equivariant_and_pure(seed in 0u64..1_000_000, off in prop::array::uniform3(-3.0f64..3.0)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pos, vel) = random_bodies(&mut rng, 3);
        let params = EngineParams::free_gravity();
        let a = dynamics_step(&state(&pos, &vel), &params, None).unwrap();
        let again = dynamics_step(&state(&pos, &vel), &params, None).unwrap();
        prop_assert_eq!(
            a.packed().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            again.packed().unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let shifted: Vec<Vec3> = pos.iter().map(|p| [0, 1, 2].map(|c| p[c] + off[c])).collect();
        let b = dynamics_step(&state(&shifted, &vel), &params, None).unwrap();
        let back: Vec<Vec3> = rows(&b.pos).iter().map(|p| [0, 1, 2].map(|c| p[c] - off[c])).collect();
        prop_assert!(max_diff(&back, &rows(&a.pos)) < 1e-10);
        prop_assert!(max_diff(&rows(&b.vel), &rows(&a.vel)) < 1e-10);
    }
}
