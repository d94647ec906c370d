//! Procedural primitive scenes with an analytic ray-trace oracle.
//!
//! Scenes are one to three colored primitives (sphere, cube, cylinder)
//! inside the unit-bound cube, captioned from a fixed template. The oracle
//! renders them with closed-form ray intersections — exact hit distances,
//! exact surface normals — which makes it both the dataset ground truth
//! and the independent reference the volume renderer is tested against.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{v_dot, v_normalize, v_sub, CameraPose, Vec3};

pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.70, 0.20]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.90, 0.85, 0.15]),
    ("cyan", [0.15, 0.80, 0.80]),
    ("magenta", [0.85, 0.20, 0.80]),
    ("orange", [0.95, 0.55, 0.10]),
    ("purple", [0.50, 0.20, 0.75]),
];

/// Fixed directional light (world space) for Lambert shading.
const LIGHT_DIR: Vec3 = [0.455, 0.273, 0.849];
const AMBIENT: f32 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
}

impl Shape {
    fn name(&self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    /// Sphere: [radius,-,-]; cube: uniform half-extent in [0]; cylinder:
    /// [radius, half_height, -].
    pub size: [f32; 2],
    pub color: [f32; 3],
    pub color_name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub caption: String,
    pub seed: u64,
}

/// Deterministic scene + caption from a seed. Primitives stay inside the
/// unit-bound cube with margin.
pub fn gen_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3usize);
    let mut primitives = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = match rng.gen_range(0..3u32) {
            0 => Shape::Sphere,
            1 => Shape::Cube,
            _ => Shape::Cylinder,
        };
        let (color_name, color) = PALETTE[rng.gen_range(0..PALETTE.len())];
        let r = rng.gen_range(0.18..0.32f32);
        let hh = rng.gen_range(0.18..0.32f32);
        let extent = match shape {
            Shape::Sphere => r,
            Shape::Cube => r,
            Shape::Cylinder => r.max(hh) * 1.415,
        };
        let lim = 0.85 - extent;
        let center = [
            rng.gen_range(-lim..lim),
            rng.gen_range(-lim..lim),
            rng.gen_range(-lim..lim),
        ];
        parts.push(format!("a {} {}", color_name, shape.name()));
        primitives.push(Primitive {
            shape,
            center,
            size: [r, hh],
            color,
            color_name: color_name.to_string(),
        });
    }
    SceneSpec {
        primitives,
        caption: parts.join(" and "),
        seed,
    }
}

/// Largest |coordinate| any primitive surface point can reach.
pub fn scene_extent(scene: &SceneSpec) -> f32 {
    scene
        .primitives
        .iter()
        .map(|p| {
            let e = match p.shape {
                Shape::Sphere | Shape::Cube => p.size[0],
                Shape::Cylinder => p.size[0].max(p.size[1]) * 1.415,
            };
            p.center.iter().map(|c| c.abs() + e).fold(0.0f32, f32::max)
        })
        .fold(0.0f32, f32::max)
}

struct Hit {
    t: f32,
    normal: Vec3, // world space, outward
    color: [f32; 3],
}

const T_MIN: f32 = 1e-4;

fn hit_sphere(o: Vec3, d: Vec3, c: Vec3, r: f32) -> Option<(f32, Vec3)> {
    let oc = v_sub(o, c);
    let b = v_dot(oc, d);
    let disc = b * b - (v_dot(oc, oc) - r * r);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = if -b - sq > T_MIN {
        -b - sq
    } else if -b + sq > T_MIN {
        -b + sq
    } else {
        return None;
    };
    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let n = [(p[0] - c[0]) / r, (p[1] - c[1]) / r, (p[2] - c[2]) / r];
    Some((t, n))
}

fn hit_box(o: Vec3, d: Vec3, c: Vec3, half: f32) -> Option<(f32, Vec3)> {
    let mut t_enter = f32::NEG_INFINITY;
    let mut t_exit = f32::INFINITY;
    let mut axis = 0usize;
    for k in 0..3 {
        if d[k].abs() < 1e-9 {
            if (o[k] - c[k]).abs() > half {
                return None;
            }
            continue;
        }
        let t1 = (c[k] - half - o[k]) / d[k];
        let t2 = (c[k] + half - o[k]) / d[k];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_enter {
            t_enter = lo;
            axis = k;
        }
        t_exit = t_exit.min(hi);
    }
    if t_exit < t_enter || t_exit < T_MIN {
        return None;
    }
    // Inside-the-box rays are not expected for orbit cameras; take the
    // entering face.
    let t = if t_enter > T_MIN { t_enter } else { return None };
    let mut n = [0.0f32; 3];
    n[axis] = -d[axis].signum();
    Some((t, n))
}

fn hit_cylinder(o: Vec3, d: Vec3, c: Vec3, r: f32, hh: f32) -> Option<(f32, Vec3)> {
    let mut best: Option<(f32, Vec3)> = None;
    let mut consider = |t: f32, n: Vec3| {
        if t > T_MIN && best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, n));
        }
    };
    // Side surface.
    let (ox, oy) = (o[0] - c[0], o[1] - c[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-12 {
        let b = ox * d[0] + oy * d[1];
        let q = ox * ox + oy * oy - r * r;
        let disc = b * b - a * q;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / a, (-b + sq) / a] {
                let z = o[2] + t * d[2] - c[2];
                if z.abs() <= hh {
                    let p = [o[0] + t * d[0], o[1] + t * d[1]];
                    consider(t, v_normalize([p[0] - c[0], p[1] - c[1], 0.0]));
                }
            }
        }
    }
    // Caps.
    if d[2].abs() > 1e-9 {
        for (zcap, nz) in [(c[2] + hh, 1.0f32), (c[2] - hh, -1.0f32)] {
            let t = (zcap - o[2]) / d[2];
            let (px, py) = (o[0] + t * d[0] - c[0], o[1] + t * d[1] - c[1]);
            if px * px + py * py <= r * r {
                consider(t, [0.0, 0.0, nz]);
            }
        }
    }
    best
}

fn trace(scene: &SceneSpec, o: Vec3, d: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for prim in &scene.primitives {
        let hit = match prim.shape {
            Shape::Sphere => hit_sphere(o, d, prim.center, prim.size[0]),
            Shape::Cube => hit_box(o, d, prim.center, prim.size[0]),
            Shape::Cylinder => hit_cylinder(o, d, prim.center, prim.size[0], prim.size[1]),
        };
        if let Some((t, n)) = hit {
            if best.as_ref().map_or(true, |b| t < b.t) {
                best = Some(Hit {
                    t,
                    normal: n,
                    color: prim.color,
                });
            }
        }
    }
    best
}

/// One oracle-rendered view: exact depth (ray distance), camera-space
/// normals oriented toward the viewer, Lambert-shaded RGB on a white
/// background.
pub struct OracleView {
    /// [h·w·3] in [0,1].
    pub rgb: Vec<f32>,
    /// [h·w] ray distance; `far` on background.
    pub depth: Vec<f32>,
    /// [h·w·3] camera-space unit normals; (0,0,1) on background.
    pub normal: Vec<f32>,
    /// [h·w] 1 on hits.
    pub mask: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

pub fn oracle_render(scene: &SceneSpec, pose: &CameraPose, far: f32) -> OracleView {
    let rays = pose.rays();
    let (h, w) = (rays.height, rays.width);
    let light = v_normalize(LIGHT_DIR);
    let mut rgb = vec![1.0f32; h * w * 3];
    let mut depth = vec![far; h * w];
    let mut normal = vec![0.0f32; h * w * 3];
    let mut mask = vec![0.0f32; h * w];
    for px in 0..h * w {
        normal[px * 3 + 2] = 1.0;
        let o = [
            rays.origins[px * 3],
            rays.origins[px * 3 + 1],
            rays.origins[px * 3 + 2],
        ];
        let d = [rays.dirs[px * 3], rays.dirs[px * 3 + 1], rays.dirs[px * 3 + 2]];
        if let Some(hit) = trace(scene, o, d) {
            let lambert = AMBIENT + (1.0 - AMBIENT) * v_dot(hit.normal, light).max(0.0);
            for ch in 0..3 {
                rgb[px * 3 + ch] = (hit.color[ch] * lambert).clamp(0.0, 1.0);
            }
            depth[px] = hit.t;
            mask[px] = 1.0;
            // World → camera, oriented toward the viewer.
            let p = [
                hit.t * d[0] + o[0],
                hit.t * d[1] + o[1],
                hit.t * d[2] + o[2],
            ];
            let _ = p;
            let mut n_cam = pose_rotate_world_to_cam(pose, hit.normal);
            if n_cam[2] < 0.0 {
                n_cam = [-n_cam[0], -n_cam[1], -n_cam[2]];
            }
            normal[px * 3..px * 3 + 3].copy_from_slice(&n_cam);
        }
    }
    OracleView {
        rgb,
        depth,
        normal,
        mask,
        height: h,
        width: w,
    }
}

fn pose_rotate_world_to_cam(pose: &CameraPose, v: Vec3) -> Vec3 {
    let m = &pose.transform;
    [
        m[0] * v[0] + m[4] * v[1] + m[8] * v[2],
        m[1] * v[0] + m[5] * v[1] + m[9] * v[2],
        m[2] * v[0] + m[6] * v[1] + m[10] * v[2],
    ]
}

/// Mask eroded by `r` pixels: interior pixels whose full (2r+1)² window is
/// valid. Screens out silhouette boundaries where depth-derived normals
/// are undefined.
pub fn erode_mask(mask: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    let window_valid = |i: isize, j: isize| -> bool {
        for dy in -(r as isize)..=r as isize {
            for dx in -(r as isize)..=r as isize {
                let (y, x) = (i + dy, j + dx);
                if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                    return false;
                }
                if mask[(y * w as isize + x) as usize] < 0.5 {
                    return false;
                }
            }
        }
        true
    };
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            if window_valid(i as isize, j as isize) {
                out[i * w + j] = 1.0;
            }
        }
    }
    out
}
