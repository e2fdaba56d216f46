//! Scalar-loop gravity integrator used as an oracle for the tensor engine.
//! Softening, focus pull and the x/y clamp sit where the engine applies them.

use slotphys::engine::EngineParams;

pub type Vec3 = [f64; 3];

fn get_pos_delta(pos: &[Vec3]) -> Vec<Vec<Vec3>> {
    let k = pos.len();
    let mut out = vec![vec![[0.0; 3]; k]; k];
    for i in 0..k {
        for j in 0..k {
            for c in 0..3 {
                out[i][j][c] = pos[j][c] - pos[i][c];
            }
        }
    }
    out
}

/// Acceleration of every body at `pos`.
pub fn accel(pos: &[Vec3], p: &EngineParams) -> Vec<Vec3> {
    let k = pos.len();
    let pos_delta = get_pos_delta(pos);
    let mut a = vec![[0.0; 3]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = pos_delta[i][j];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + p.softening_eps;
            for c in 0..3 {
                let f_dir = d[c] / r2.sqrt();
                // Force between two bodies of the shared mass, then F = ma.
                let f = f_dir * (p.grav_const * (p.mass * p.mass / r2));
                a[i][c] += f / p.mass;
            }
        }
        if p.enable_focus_pull {
            for c in 0..3 {
                a[i][c] += p.focus_strength * (p.focus_point[c] - pos[i][c]);
            }
        }
    }
    a
}

pub fn dynamics_step(pos: &[Vec3], vel: &[Vec3], p: &EngineParams) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut pos = pos.to_vec();
    let mut vel = vel.to_vec();
    let simulation_dt = p.sim_dt * p.dt_factor;
    for _ in 0..p.substeps {
        let a = accel(&pos, p);
        for i in 0..pos.len() {
            for c in 0..3 {
                vel[i][c] += simulation_dt * a[i][c];
            }
            for c in 0..3 {
                pos[i][c] += simulation_dt * vel[i][c];
            }
            if p.enable_xy_limit {
                for c in 0..2 {
                    if pos[i][c] > p.xy_limit {
                        pos[i][c] = p.xy_limit;
                        vel[i][c] = 0.0;
                    } else if pos[i][c] < -p.xy_limit {
                        pos[i][c] = -p.xy_limit;
                        vel[i][c] = 0.0;
                    }
                }
            }
        }
    }
    (pos, vel)
}
