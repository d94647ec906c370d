//! Camera poses, pinhole rays, the orbit view grid, and novel-view
//! sampling.
//!
//! Convention, used everywhere: right-handed world with +z up, poses stored
//! camera-to-world, camera looking down its −z axis at the world origin.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Vec3 = [f32; 3];

pub(crate) fn v_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn v_dot(a: Vec3, b: Vec3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn v_cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn v_norm(a: Vec3) -> f32 {
    v_dot(a, a).sqrt()
}

pub(crate) fn v_normalize(a: Vec3) -> Vec3 {
    let n = v_norm(a).max(1e-12);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Rigid camera-to-world transform plus pinhole intrinsics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraPose {
    /// 4×4 camera-to-world matrix, row-major.
    pub transform: [f32; 16],
    /// Vertical field of view in radians.
    pub fov_y: f32,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum CameraError {
    #[error("camera rotation block is not orthonormal (deviation {deviation})")]
    NotOrthonormal { deviation: f32 },
    #[error("camera rotation block is not right-handed (det {det})")]
    NotRightHanded { det: f32 },
}

impl CameraPose {
    /// Pose looking from `position` at `target`. `up` picks the roll; when
    /// it is (near-)parallel to the view direction, +x world is used
    /// instead.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y: f32,
        width: usize,
        height: usize,
    ) -> CameraPose {
        let backward = v_normalize(v_sub(position, target)); // +z camera
        let up = if v_cross(up, backward).iter().map(|v| v * v).sum::<f32>() < 1e-8 {
            [1.0, 0.0, 0.0]
        } else {
            up
        };
        let right = v_normalize(v_cross(up, backward));
        let true_up = v_cross(backward, right);
        let mut m = [0.0f32; 16];
        for r in 0..3 {
            m[r * 4] = right[r];
            m[r * 4 + 1] = true_up[r];
            m[r * 4 + 2] = backward[r];
            m[r * 4 + 3] = position[r];
        }
        m[15] = 1.0;
        CameraPose {
            transform: m,
            fov_y,
            width,
            height,
        }
    }

    /// Build from a serialized row-major matrix, validating the rotation
    /// block (orthonormal within 1e-5, det +1 within 1e-5).
    pub fn from_matrix(
        transform: [f32; 16],
        fov_y: f32,
        width: usize,
        height: usize,
    ) -> Result<CameraPose, CameraError> {
        let pose = CameraPose {
            transform,
            fov_y,
            width,
            height,
        };
        let cols = [pose.axis(0), pose.axis(1), pose.axis(2)];
        let mut deviation = 0.0f32;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                deviation = deviation.max((v_dot(cols[i], cols[j]) - want).abs());
            }
        }
        if deviation > 1e-5 {
            return Err(CameraError::NotOrthonormal { deviation });
        }
        let det = v_dot(v_cross(cols[0], cols[1]), cols[2]);
        if (det - 1.0).abs() > 1e-5 {
            return Err(CameraError::NotRightHanded { det });
        }
        Ok(pose)
    }

    fn axis(&self, col: usize) -> Vec3 {
        [
            self.transform[col],
            self.transform[4 + col],
            self.transform[8 + col],
        ]
    }

    pub fn position(&self) -> Vec3 {
        [self.transform[3], self.transform[7], self.transform[11]]
    }

    /// World-space view direction (−z camera axis).
    pub fn forward(&self) -> Vec3 {
        let z = self.axis(2);
        [-z[0], -z[1], -z[2]]
    }

    /// World point → camera coordinates (x right, y up, z toward viewer).
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let d = v_sub(p, self.position());
        [
            v_dot(self.axis(0), d),
            v_dot(self.axis(1), d),
            v_dot(self.axis(2), d),
        ]
    }

    /// Focal length in pixels (square pixels, vertical fov).
    pub fn focal_px(&self) -> f32 {
        (self.height as f32 / 2.0) / (self.fov_y / 2.0).tan()
    }

    /// Project a world point to pixel coordinates (col, row), pixel-center
    /// origin at (0.5, 0.5).
    pub fn project(&self, p: Vec3) -> Option<(f32, f32)> {
        let c = self.world_to_camera(p);
        if c[2] >= -1e-9 {
            return None; // behind the camera
        }
        let f = self.focal_px();
        let x = self.width as f32 / 2.0 + f * c[0] / -c[2];
        let y = self.height as f32 / 2.0 - f * c[1] / -c[2];
        Some((x, y))
    }

    /// Per-pixel rays through pixel centers; directions are unit length.
    pub fn rays(&self) -> RayBundle {
        let (h, w) = (self.height, self.width);
        let f = self.focal_px();
        let right = self.axis(0);
        let up = self.axis(1);
        let fwd = self.forward();
        let pos = self.position();
        let mut origins = vec![0.0f32; h * w * 3];
        let mut dirs = vec![0.0f32; h * w * 3];
        for i in 0..h {
            for j in 0..w {
                let cx = (j as f32 + 0.5 - w as f32 / 2.0) / f;
                let cy = -(i as f32 + 0.5 - h as f32 / 2.0) / f;
                let d = v_normalize([
                    fwd[0] + cx * right[0] + cy * up[0],
                    fwd[1] + cx * right[1] + cy * up[1],
                    fwd[2] + cx * right[2] + cy * up[2],
                ]);
                let base = (i * w + j) * 3;
                origins[base..base + 3].copy_from_slice(&pos);
                dirs[base..base + 3].copy_from_slice(&d);
            }
        }
        RayBundle {
            origins,
            dirs,
            height: h,
            width: w,
        }
    }
}

/// Per-pixel ray origins and unit directions, row-major [h, w, 3].
pub struct RayBundle {
    pub origins: Vec<f32>,
    pub dirs: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

/// Orbit labels for one grid pose.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewLabel {
    pub elevation_deg: f32,
    pub azimuth_deg: f32,
    pub radius: f32,
}

/// Ordered orbit of look-at poses around the origin.
#[derive(Clone, Debug)]
pub struct ViewGrid {
    pub poses: Vec<CameraPose>,
    pub labels: Vec<ViewLabel>,
}

/// Ring elevations: the upper ring sits mid-range of the 5°–30° band, the
/// equatorial ring mid-range of −5°–5°; one top and one bottom view close
/// the grid.
pub const RING1_ELEVATION_DEG: f32 = 17.5;
pub const RING2_ELEVATION_DEG: f32 = 0.0;

/// Two constant-elevation azimuth rings plus top and bottom views, all
/// looking at the origin from `radius`.
pub fn make_view_grid(
    n_ring1: usize,
    n_ring2: usize,
    radius: f32,
    fov_y: f32,
    res: usize,
) -> ViewGrid {
    assert!(n_ring1 >= 1 && n_ring2 >= 1, "ring counts must be >= 1");
    assert!(radius > 0.0, "radius must be positive");
    let mut poses = Vec::with_capacity(n_ring1 + n_ring2 + 2);
    let mut labels = Vec::with_capacity(n_ring1 + n_ring2 + 2);
    let mut push = |elev_deg: f32, azim_deg: f32| {
        let el = elev_deg.to_radians();
        let az = azim_deg.to_radians();
        let pos = [
            radius * el.cos() * az.cos(),
            radius * el.cos() * az.sin(),
            radius * el.sin(),
        ];
        poses.push(CameraPose::look_at(
            pos,
            [0.0; 3],
            [0.0, 0.0, 1.0],
            fov_y,
            res,
            res,
        ));
        labels.push(ViewLabel {
            elevation_deg: elev_deg,
            azimuth_deg: azim_deg,
            radius,
        });
    };
    for k in 0..n_ring1 {
        push(RING1_ELEVATION_DEG, 360.0 * k as f32 / n_ring1 as f32);
    }
    for k in 0..n_ring2 {
        push(RING2_ELEVATION_DEG, 360.0 * k as f32 / n_ring2 as f32);
    }
    push(90.0, 0.0);
    push(-90.0, 0.0);
    ViewGrid { poses, labels }
}

/// Sample the cycle's novel view: with probability `p_identity` the
/// reference pose itself (flag true, activating the degenerate single-pass
/// branch), otherwise a uniformly chosen other grid pose.
pub fn sample_novel_view(
    rng: &mut impl Rng,
    grid: &ViewGrid,
    p_identity: f32,
    reference_index: usize,
) -> (usize, bool) {
    debug_assert!((0.0..=1.0).contains(&p_identity));
    if grid.poses.len() <= 1 || rng.gen::<f32>() < p_identity {
        return (reference_index, true);
    }
    let mut idx = rng.gen_range(0..grid.poses.len() - 1);
    if idx >= reference_index {
        idx += 1;
    }
    (idx, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn grid_has_expected_pose_count() {
        let grid = make_view_grid(8, 4, 2.5, 0.9, 64);
        assert_eq!(grid.poses.len(), 14);
    }

    #[test]
    fn grid_positions_on_sphere_looking_at_origin() {
        let grid = make_view_grid(8, 4, 2.5, 0.9, 64);
        for pose in &grid.poses {
            let p = pose.position();
            assert!((v_norm(p) - 2.5).abs() < 1e-5);
            let fwd = pose.forward();
            let to_origin = v_normalize(v_sub([0.0; 3], p));
            for k in 0..3 {
                assert!((fwd[k] - to_origin[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn azimuth_zero_elevation_zero_sits_on_x_axis() {
        let grid = make_view_grid(4, 4, 2.0, 0.9, 32);
        // First ring-2 pose: elevation 0, azimuth 0.
        let pose = &grid.poses[4];
        let p = pose.position();
        assert!((p[0] - 2.0).abs() < 1e-6 && p[1].abs() < 1e-6 && p[2].abs() < 1e-6);
    }

    #[test]
    fn azimuth_shift_permutes_ring_poses() {
        let n = 8;
        let grid = make_view_grid(n, 4, 2.5, 0.9, 64);
        let shifted: Vec<Vec3> = (0..n)
            .map(|k| grid.poses[(k + 1) % n].position())
            .collect();
        for (k, want) in shifted.iter().enumerate() {
            let az = (grid.labels[k].azimuth_deg + 360.0 / n as f32).to_radians();
            let el = grid.labels[k].elevation_deg.to_radians();
            let got = [
                2.5 * el.cos() * az.cos(),
                2.5 * el.cos() * az.sin(),
                2.5 * el.sin(),
            ];
            for c in 0..3 {
                assert!((want[c] - got[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn center_pixel_ray_is_forward() {
        // Odd resolution puts a pixel center exactly on the axis.
        let pose = CameraPose::look_at([2.0, 1.0, 0.7], [0.0; 3], [0.0, 0.0, 1.0], 0.9, 33, 33);
        let rays = pose.rays();
        let c = (16 * 33 + 16) * 3;
        let fwd = pose.forward();
        for k in 0..3 {
            assert!((rays.dirs[c + k] - fwd[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn all_ray_directions_unit_norm() {
        let pose = CameraPose::look_at([0.0, 2.5, 0.4], [0.0; 3], [0.0, 0.0, 1.0], 0.9, 16, 16);
        let rays = pose.rays();
        for d in rays.dirs.chunks(3) {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn corner_pixel_angle_matches_pinhole_geometry() {
        let (w, h) = (33usize, 33usize);
        let fov = 0.9f32;
        let pose = CameraPose::look_at([3.0, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], fov, w, h);
        let rays = pose.rays();
        let fwd = pose.forward();
        // Top-left pixel center offset from the axis, in camera units.
        let f = pose.focal_px();
        let cx = (0.5 - w as f32 / 2.0) / f;
        let cy = -(0.5 - h as f32 / 2.0) / f;
        let want = (cx * cx + cy * cy).sqrt().atan();
        let d = [rays.dirs[0], rays.dirs[1], rays.dirs[2]];
        let got = v_dot(d, fwd).clamp(-1.0, 1.0).acos();
        assert!((want - got).abs() < 1e-5, "want {want} got {got}");
    }

    #[test]
    fn origin_projects_to_principal_point() {
        let grid = make_view_grid(8, 4, 2.5, 0.9, 64);
        for pose in &grid.poses {
            let (x, y) = pose.project([0.0; 3]).unwrap();
            assert!((x - 32.0).abs() < 1e-3 && (y - 32.0).abs() < 1e-3);
        }
    }

    #[test]
    fn novel_view_sampling_respects_probabilities() {
        let grid = make_view_grid(8, 4, 2.5, 0.9, 32);
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..50 {
            let (idx, ident) = sample_novel_view(&mut rng, &grid, 1.0, 3);
            assert!(ident && idx == 3);
            let (idx, ident) = sample_novel_view(&mut rng, &grid, 0.0, 3);
            assert!(!ident && idx != 3);
        }
        let mut hits = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let (_, ident) = sample_novel_view(&mut rng, &grid, 0.25, 0);
            hits += ident as usize;
        }
        let frac = hits as f32 / n as f32;
        assert!((frac - 0.25).abs() < 0.02, "identity fraction {frac}");
    }

    #[test]
    fn matrix_roundtrip_validates() {
        let pose = CameraPose::look_at([1.0, 2.0, 0.5], [0.0; 3], [0.0, 0.0, 1.0], 0.9, 8, 8);
        let back = CameraPose::from_matrix(pose.transform, pose.fov_y, 8, 8).unwrap();
        assert_eq!(back.transform, pose.transform);
        let mut bad = pose.transform;
        bad[0] += 0.1;
        assert!(CameraPose::from_matrix(bad, 0.9, 8, 8).is_err());
    }
}
