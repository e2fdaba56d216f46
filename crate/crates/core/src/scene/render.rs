//! Pinhole camera and shaded-disc renderer.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed pinhole at `(0, 0, distance)` looking down −z at the origin.
/// Image x grows to the right, image y grows downward (world y is up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Camera {
    pub distance: f64,
    /// Focal length as a multiple of the image width.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            distance: 12.0,
            focal: 1.4,
            width: 64,
            height: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Pixel coordinates (x, y), continuous; pixel `(c, r)` covers
    /// `[c, c+1) × [r, r+1)`.
    pub pixel: [f64; 2],
    pub depth: f64,
}

impl Camera {
    pub fn focal_px(&self) -> f64 {
        self.focal * self.width as f64
    }

    pub fn project(&self, p: [f64; 3]) -> Result<Projection> {
        let depth = self.distance - p[2];
        if !(depth > 0.0) {
            return Err(Error::BehindCamera(depth));
        }
        let f = self.focal_px();
        Ok(Projection {
            pixel: [
                self.width as f64 / 2.0 + f * p[0] / depth,
                self.height as f64 / 2.0 - f * p[1] / depth,
            ],
            depth,
        })
    }

    pub fn apparent_radius(&self, radius: f64, depth: f64) -> f64 {
        self.focal_px() * radius / depth
    }
}

/// Shading parameters for the disc renderer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lighting {
    /// Direction toward the light in camera coordinates (x right, y up,
    /// z toward the viewer); normalized on use.
    pub direction: [f64; 3],
    /// Fraction of the intensity that depends on the surface normal.
    pub shading: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Self {
            direction: [-0.4, 0.5, 0.77],
            shading: 0.35,
        }
    }
}

/// One drawable body.
#[derive(Debug, Clone, Copy)]
pub struct Disc {
    pub center: [f64; 3],
    pub radius: f64,
    pub color: [f64; 3],
}

/// Renders discs with depth ordering. Returns the RGB frame `[H, W, 3]` and
/// the segmentation `[H, W]` (label k+1 for disc k, 0 for background).
/// Bodies behind the camera or fully off-screen are simply absent.
pub fn render_frame(discs: &[Disc], camera: &Camera, light: &Lighting) -> (Array3<u8>, Array2<u8>) {
    let (h, w) = (camera.height, camera.width);
    let mut frame = Array3::<u8>::zeros((h, w, 3));
    let mut seg = Array2::<u8>::zeros((h, w));

    let mut visible: Vec<(usize, Projection, f64)> = discs
        .iter()
        .enumerate()
        .filter_map(|(k, d)| {
            let p = camera.project(d.center).ok()?;
            Some((k, p, camera.apparent_radius(d.radius, p.depth)))
        })
        .collect();
    // Painter's order: farthest first; ties broken by index for determinism.
    visible.sort_by(|a, b| b.1.depth.total_cmp(&a.1.depth).then(a.0.cmp(&b.0)));

    let l = light.direction;
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    let l = [l[0] / norm, l[1] / norm, l[2] / norm];

    for (k, proj, r) in visible {
        let [cx, cy] = proj.pixel;
        let r0 = ((cy - r).floor().max(0.0)) as usize;
        let r1 = ((cy + r).ceil().min(h as f64)).max(0.0) as usize;
        let c0 = ((cx - r).floor().max(0.0)) as usize;
        let c1 = ((cx + r).ceil().min(w as f64)).max(0.0) as usize;
        let color = discs[k].color;
        for row in r0..r1 {
            for col in c0..c1 {
                let dx = (col as f64 + 0.5 - cx) / r;
                let dy = (row as f64 + 0.5 - cy) / r;
                let rho2 = dx * dx + dy * dy;
                if rho2 > 1.0 {
                    continue;
                }
                let nz = (1.0 - rho2).sqrt();
                let lambert = (dx * l[0] - dy * l[1] + nz * l[2]).max(0.0);
                let intensity = 1.0 - light.shading + light.shading * lambert;
                for ch in 0..3 {
                    let v = (color[ch] * intensity * 255.0).round().clamp(0.0, 255.0);
                    frame[[row, col, ch]] = v as u8;
                }
                seg[[row, col]] = (k + 1) as u8;
            }
        }
    }
    (frame, seg)
}

/// Rigid-translation optical flow between two frames: each pixel labelled k
/// in `seg_t` moves by the displacement of body k's projected center.
/// Background flow is zero. Returned as `[H, W, 2]` (x then y, pixels/frame).
pub fn compute_flow(
    centers_t: &[[f64; 3]],
    centers_next: &[[f64; 3]],
    seg_t: &Array2<u8>,
    camera: &Camera,
) -> Array3<f32> {
    let (h, w) = seg_t.dim();
    let displacement: Vec<[f64; 2]> = centers_t
        .iter()
        .zip(centers_next)
        .map(|(a, b)| match (camera.project(*a), camera.project(*b)) {
            (Ok(pa), Ok(pb)) => [pb.pixel[0] - pa.pixel[0], pb.pixel[1] - pa.pixel[1]],
            _ => [0.0, 0.0],
        })
        .collect();
    let mut flow = Array3::<f32>::zeros((h, w, 2));
    for ((row, col), &label) in seg_t.indexed_iter() {
        if label == 0 {
            continue;
        }
        if let Some(d) = displacement.get(label as usize - 1) {
            flow[[row, col, 0]] = d[0] as f32;
            flow[[row, col, 1]] = d[1] as f32;
        }
    }
    flow
}

/// Tight normalized box `[x_min, y_min, x_max, y_max]` around the pixels
/// carrying `label`, or `None` if the label is absent.
pub fn label_bbox(seg: &Array2<u8>, label: u8) -> Option<[f64; 4]> {
    let (h, w) = seg.dim();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for ((row, col), &l) in seg.indexed_iter() {
        if l != label {
            continue;
        }
        bounds = Some(match bounds {
            None => (col, row, col, row),
            Some((x0, y0, x1, y1)) => (x0.min(col), y0.min(row), x1.max(col), y1.max(row)),
        });
    }
    bounds.map(|(x0, y0, x1, y1)| {
        [
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            (x1 + 1) as f64 / w as f64,
            (y1 + 1) as f64 / h as f64,
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_projects_to_center() {
        let cam = Camera::default();
        let p = cam.project([0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.pixel, [32.0, 32.0]);
        assert_eq!(p.depth, 12.0);
    }

    #[test]
    fn half_depth_doubles_radius() {
        let cam = Camera::default();
        let far = cam.project([0.0, 0.0, 0.0]).unwrap();
        let near = cam.project([0.0, 0.0, 6.0]).unwrap();
        let r_far = cam.apparent_radius(0.5, far.depth);
        let r_near = cam.apparent_radius(0.5, near.depth);
        assert!((r_near - 2.0 * r_far).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = Camera::default();
        assert!(matches!(cam.project([0.0, 0.0, 12.0]), Err(Error::BehindCamera(_))));
        assert!(matches!(cam.project([1.0, 0.0, 20.0]), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn empty_scene_is_black() {
        let (frame, seg) = render_frame(&[], &Camera::default(), &Lighting::default());
        assert!(frame.iter().all(|&v| v == 0));
        assert!(seg.iter().all(|&v| v == 0));
    }

    #[test]
    fn centered_disc_area() {
        let cam = Camera::default();
        let disc = Disc {
            center: [0.0, 0.0, 0.0],
            radius: 1.2,
            color: [0.8, 0.2, 0.3],
        };
        let (frame, seg) = render_frame(&[disc], &cam, &Lighting::default());
        let r = cam.apparent_radius(1.2, 12.0);
        let expected = std::f64::consts::PI * r * r;
        let count = seg.iter().filter(|&&v| v == 1).count() as f64;
        assert!((count - expected).abs() / expected < 0.05, "{count} vs {expected}");
        // Shading modulates but never brightens past the base color.
        let red_max = frame.iter().step_by(3).copied().max().unwrap();
        assert!(red_max <= 204 && red_max > 150);
    }

    #[test]
    fn nearer_disc_occludes() {
        let cam = Camera::default();
        let far = Disc {
            center: [0.0, 0.0, -1.0],
            radius: 1.0,
            color: [1.0, 0.0, 0.0],
        };
        let near = Disc {
            center: [0.5, 0.0, 1.0],
            radius: 1.0,
            color: [0.0, 1.0, 0.0],
        };
        for discs in [[far, near], [near, far]] {
            let (_, seg) = render_frame(&discs, &cam, &Lighting::default());
            let near_label = if discs[0].center[2] > 0.0 { 1 } else { 2 };
            // The pixel where both discs project is claimed by the nearer one.
            let p = cam.project([0.2, 0.0, 0.0]).unwrap().pixel;
            assert_eq!(seg[[p[1] as usize, p[0] as usize]], near_label);
        }
    }

    #[test]
    fn flow_is_zero_for_static_scene() {
        let cam = Camera::default();
        let centers = [[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]];
        let discs: Vec<Disc> = centers
            .iter()
            .map(|&c| Disc {
                center: c,
                radius: 0.5,
                color: [1.0; 3],
            })
            .collect();
        let (_, seg) = render_frame(&discs, &cam, &Lighting::default());
        let flow = compute_flow(&centers, &centers, &seg, &cam);
        assert!(flow.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flow_sign_for_rightward_motion() {
        let cam = Camera::default();
        let a = [[0.0, 0.0, 0.0]];
        let b = [[0.3, 0.0, 0.0]];
        let disc = Disc {
            center: a[0],
            radius: 0.6,
            color: [1.0; 3],
        };
        let (_, seg) = render_frame(&[disc], &cam, &Lighting::default());
        let flow = compute_flow(&a, &b, &seg, &cam);
        for ((r, c), &l) in seg.indexed_iter() {
            if l == 1 {
                assert!(flow[[r, c, 0]] > 0.0);
                assert!(flow[[r, c, 1]].abs() < 1e-6);
            } else {
                assert_eq!(flow[[r, c, 0]], 0.0);
            }
        }
    }

    #[test]
    fn bbox_of_block() {
        let mut seg = Array2::<u8>::zeros((8, 8));
        for r in 2..5 {
            for c in 1..7 {
                seg[[r, c]] = 3;
            }
        }
        assert_eq!(label_bbox(&seg, 3), Some([1.0 / 8.0, 2.0 / 8.0, 7.0 / 8.0, 5.0 / 8.0]));
        assert_eq!(label_bbox(&seg, 1), None);
    }
}
