//! Differentiable condition extractors: edge, sketch, depth, normal.
//!
//! Every extractor is a pure function of its inputs and differentiable end
//! to end, so cycle losses can push gradients through re-extracted
//! conditions. The edge extractor is a soft-thresholded Sobel pipeline
//! (blur → gradient magnitude → sigmoid); hysteresis and non-max
//! suppression have no useful gradients and are omitted. The sketch
//! extractor is a small convolutional net with frozen seeded weights
//! standing in for a pretrained model. Depth conditions are min-max
//! normalized rendered depth; normal conditions come from back-projecting
//! the depth map and crossing its tangents.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::render::RenderOutput;
use crate::tensor::{Result, Tensor};

/// Seed for the frozen sketch network weights.
const SKETCH_WEIGHT_SEED: u64 = 0xC1C3D;

/// Soft edge threshold: sigmoid(k·(magnitude − tau)).
pub const EDGE_SOFT_K: f32 = 20.0;
pub const EDGE_SOFT_TAU: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Edge,
    Sketch,
    Depth,
    Normal,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [
        ConditionKind::Edge,
        ConditionKind::Sketch,
        ConditionKind::Depth,
        ConditionKind::Normal,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ConditionKind::Edge => "edge",
            ConditionKind::Sketch => "sketch",
            ConditionKind::Depth => "depth",
            ConditionKind::Normal => "normal",
        }
    }

    /// Channel count of the condition map.
    pub fn channels(&self) -> usize {
        match self {
            ConditionKind::Normal => 3,
            _ => 1,
        }
    }
}

impl std::str::FromStr for ConditionKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "edge" => Ok(ConditionKind::Edge),
            "sketch" => Ok(ConditionKind::Sketch),
            "depth" => Ok(ConditionKind::Depth),
            "normal" => Ok(ConditionKind::Normal),
            other => Err(format!(
                "unknown condition kind '{other}' (expected edge|sketch|depth|normal)"
            )),
        }
    }
}

impl std::fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A typed 2D condition map. Scalar kinds are [h,w] in [0,1]; normals are
/// [h,w,3] unit vectors. `mask` (when present) marks pixels the map is
/// meaningful on; losses and metrics restrict themselves to it.
pub struct ConditionMap {
    pub kind: ConditionKind,
    pub data: Tensor,
    pub mask: Option<Vec<f32>>,
}

impl ConditionMap {
    pub fn resolution(&self) -> (usize, usize) {
        (self.data.shape()[0], self.data.shape()[1])
    }

    pub fn valid_mask(&self) -> Vec<f32> {
        match &self.mask {
            Some(m) => m.clone(),
            None => vec![1.0; self.data.shape()[0] * self.data.shape()[1]],
        }
    }

    /// Channel-first tensor for the generator input: [c, h, w].
    pub fn chw(&self) -> Result<Tensor> {
        let (h, w) = self.resolution();
        match self.kind {
            ConditionKind::Normal => hwc_to_chw(&self.data),
            _ => self.data.reshape(&[1, h, w]),
        }
    }
}

/// [h,w,c] → [c,h,w] by per-channel slicing (differentiable).
pub fn hwc_to_chw(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut chans = Vec::with_capacity(c);
    for ch in 0..c {
        chans.push(img.slice(2, ch, 1)?.reshape(&[1, h, w])?);
    }
    let refs: Vec<&Tensor> = chans.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Rec. 601 luma of an [h,w,3] image → [1,h,w].
fn luma(img: &Tensor) -> Result<Tensor> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let r = img.slice(2, 0, 1)?.reshape(&[1, h, w])?;
    let g = img.slice(2, 1, 1)?.reshape(&[1, h, w])?;
    let b = img.slice(2, 2, 1)?.reshape(&[1, h, w])?;
    r.scale(0.299)?.add(&g.scale(0.587)?)?.add(&b.scale(0.114)?)
}

/// 5×5 Gaussian blur, sigma 1, zero padding. Input [1,h,w].
pub fn gaussian_blur_5x5(t: &Tensor) -> Result<Tensor> {
    let g1: Vec<f32> = (-2..=2).map(|x| (-(x * x) as f32 / 2.0).exp()).collect();
    let norm: f32 = g1.iter().sum();
    let mut k = vec![0.0f32; 25];
    for y in 0..5 {
        for x in 0..5 {
            k[y * 5 + x] = g1[y] * g1[x] / (norm * norm);
        }
    }
    let weight = Tensor::from_vec(k, &[1, 1, 5, 5])?;
    t.conv2d(&weight, 1, 2)
}

/// Normalized Sobel gradient magnitude of [1,h,w]: a unit step produces
/// magnitude 1 at the discontinuity.
pub fn sobel_magnitude(t: &Tensor) -> Result<Tensor> {
    let kx: Vec<f32> = [-1.0f32, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]
        .iter()
        .map(|v| v / 4.0)
        .collect();
    let ky: Vec<f32> = [-1.0f32, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]
        .iter()
        .map(|v| v / 4.0)
        .collect();
    let wx = Tensor::from_vec(kx, &[1, 1, 3, 3])?;
    let wy = Tensor::from_vec(ky, &[1, 1, 3, 3])?;
    let gx = t.conv2d(&wx, 1, 1)?;
    let gy = t.conv2d(&wy, 1, 1)?;
    gx.mul(&gx)?.add(&gy.mul(&gy)?)?.offset(1e-12)?.sqrt()
}

/// Differentiable edge extractor: luma → Gaussian blur → Sobel magnitude →
/// soft threshold. Input image [h,w,3] in [0,1].
pub fn f_canny(image: &Tensor) -> Result<ConditionMap> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let m = sobel_magnitude(&gaussian_blur_5x5(&luma(image)?)?)?;
    let edge = m
        .offset(-EDGE_SOFT_TAU)?
        .scale(EDGE_SOFT_K)?
        .sigmoid()?
        .reshape(&[h, w])?;
    Ok(ConditionMap {
        kind: ConditionKind::Edge,
        data: edge,
        mask: None,
    })
}

/// Frozen random conv weights for the sketch net, regenerated
/// deterministically from the fixed seed.
fn sketch_weights() -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(SKETCH_WEIGHT_SEED);
    let mut conv = |cout: usize, cin: usize| -> Tensor {
        let s = (2.0 / (cin * 9) as f32).sqrt();
        let data: Vec<f32> = (0..cout * cin * 9).map(|_| rng.gen_range(-s..s)).collect();
        Tensor::from_vec(data, &[cout, cin, 3, 3]).expect("static shape")
    };
    (conv(8, 3), conv(8, 8), conv(1, 8))
}

/// Sketch extractor: a fixed 3-layer conv net (frozen weights) with a
/// sigmoid head. Stands in for a pretrained sketch network; the cycle
/// machinery only needs a fixed differentiable map.
pub fn f_sketch(image: &Tensor) -> Result<ConditionMap> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (w1, w2, w3) = sketch_weights();
    let x = hwc_to_chw(image)?;
    let out = x
        .conv2d(&w1, 1, 1)?
        .relu()?
        .conv2d(&w2, 1, 1)?
        .relu()?
        .conv2d(&w3, 1, 1)?
        .sigmoid()?
        .reshape(&[h, w])?;
    Ok(ConditionMap {
        kind: ConditionKind::Sketch,
        data: out,
        mask: None,
    })
}

/// Min-max depth normalization over valid pixels to [0,1]; invalid pixels
/// read 1 (background = far). A constant valid region maps to zeros.
/// Positive affine rescalings of the depth leave the output unchanged,
/// which is what makes depth comparisons scale-agnostic.
pub fn f_norm(depth: &Tensor, mask: &[f32]) -> Result<ConditionMap> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let lo = depth.masked_min(mask)?;
    let hi = depth.masked_max(mask)?;
    let range = hi.sub(&lo)?;
    let mask_t = Tensor::from_vec(mask.to_vec(), &[h, w])?;
    let inv_mask = Tensor::from_vec(mask.iter().map(|m| 1.0 - m).collect(), &[h, w])?;
    let data = if range.item()? < 1e-12 {
        // Degenerate: zeros on valid pixels, keeping the graph attached.
        depth.scale(0.0)?.add(&inv_mask)?
    } else {
        let shifted = depth.sub(&lo.reshape(&[1, 1])?.broadcast_to(&[h, w])?)?;
        let norm = shifted.div(&range.reshape(&[1, 1])?.broadcast_to(&[h, w])?)?;
        norm.mul(&mask_t)?.add(&inv_mask)?
    };
    Ok(ConditionMap {
        kind: ConditionKind::Depth,
        data,
        mask: Some(mask.to_vec()),
    })
}

/// Convert ray-distance depth (what the renderer and oracle produce) to
/// planar z-depth by the per-pixel view-cone cosine; [`f_d2n`]'s
/// back-projection assumes z-depth. Differentiable (constant grid).
pub fn z_from_ray_depth(depth: &Tensor, focal_px: f32) -> Result<Tensor> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let mut cos = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let u = (j as f32 + 0.5 - cx) / focal_px;
            let v = (i as f32 + 0.5 - cy) / focal_px;
            cos[i * w + j] = 1.0 / (1.0 + u * u + v * v).sqrt();
        }
    }
    depth.mul(&Tensor::from_vec(cos, &[h, w])?)
}

/// Column/row shift with edge replication, so central differences become
/// one-sided at the borders.
fn shift(t: &Tensor, axis: usize, dir: isize) -> Result<Tensor> {
    let len = t.shape()[axis];
    if dir > 0 {
        let body = t.slice(axis, 1, len - 1)?;
        let edge = t.slice(axis, len - 1, 1)?;
        Tensor::concat(&[&body, &edge], axis)
    } else {
        let edge = t.slice(axis, 0, 1)?;
        let body = t.slice(axis, 0, len - 1)?;
        Tensor::concat(&[&edge, &body], axis)
    }
}

/// Depth → unit surface normals via back-projection and tangent cross
/// products. `focal_px` is the pinhole focal length matching the depth
/// map. Normals are camera-space, oriented toward the viewer (+z), so a
/// fronto-parallel plane reads (0,0,1).
pub fn f_d2n(depth: &Tensor, focal_px: f32, mask: Option<&[f32]>) -> Result<ConditionMap> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let mut u = vec![0.0f32; h * w];
    let mut v = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            u[i * w + j] = (j as f32 + 0.5 - cx) / focal_px;
            v[i * w + j] = -(i as f32 + 0.5 - cy) / focal_px;
        }
    }
    let u_t = Tensor::from_vec(u, &[h, w])?;
    let v_t = Tensor::from_vec(v, &[h, w])?;
    // Camera-space point per pixel: (u·D, v·D, −D).
    let px = depth.mul(&u_t)?;
    let py = depth.mul(&v_t)?;
    let pz = depth.scale(-1.0)?;

    let du = |t: &Tensor| -> Result<Tensor> { shift(t, 1, 1)?.sub(&shift(t, 1, -1)?) };
    let dv = |t: &Tensor| -> Result<Tensor> { shift(t, 0, 1)?.sub(&shift(t, 0, -1)?) };
    let (tux, tuy, tuz) = (du(&px)?, du(&py)?, du(&pz)?);
    let (tvx, tvy, tvz) = (dv(&px)?, dv(&py)?, dv(&pz)?);

    // n = tv × tu (this order makes flat depth face the camera).
    let nx = tvy.mul(&tuz)?.sub(&tvz.mul(&tuy)?)?;
    let ny = tvz.mul(&tux)?.sub(&tvx.mul(&tuz)?)?;
    let nz = tvx.mul(&tuy)?.sub(&tvy.mul(&tux)?)?;

    // Orient toward the viewer; the flip factor is piecewise constant.
    let flip: Vec<f32> = nz
        .data()
        .iter()
        .map(|z| if *z < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let flip_t = Tensor::from_vec(flip, &[h, w])?;
    let stack = Tensor::concat(
        &[
            &nx.mul(&flip_t)?.reshape(&[h * w, 1])?,
            &ny.mul(&flip_t)?.reshape(&[h * w, 1])?,
            &nz.mul(&flip_t)?.reshape(&[h * w, 1])?,
        ],
        1,
    )?;
    let data = stack.l2_normalize(1e-12)?.reshape(&[h, w, 3])?;
    Ok(ConditionMap {
        kind: ConditionKind::Normal,
        data,
        mask: mask.map(|m| m.to_vec()),
    })
}

/// Dispatch an extractor over a render: edge/sketch read the image, depth
/// and normal read the rendered depth (valid where alpha > 0.5).
pub fn extract(kind: ConditionKind, rendered: &RenderOutput) -> Result<ConditionMap> {
    match kind {
        ConditionKind::Edge => f_canny(&rendered.image),
        ConditionKind::Sketch => f_sketch(&rendered.image),
        ConditionKind::Depth => f_norm(&rendered.depth, &rendered.mask()),
        ConditionKind::Normal => {
            let mask = rendered.mask();
            let z = z_from_ray_depth(&rendered.depth, rendered.focal_px)?;
            f_d2n(&z, rendered.focal_px, Some(&mask))
        }
    }
}

/// Same dispatch over stored ground-truth buffers (image [h,w,3], depth
/// [h,w], validity mask, focal length).
pub fn extract_from_parts(
    kind: ConditionKind,
    image: &Tensor,
    depth: &Tensor,
    mask: &[f32],
    focal_px: f32,
) -> Result<ConditionMap> {
    match kind {
        ConditionKind::Edge => f_canny(image),
        ConditionKind::Sketch => f_sketch(image),
        ConditionKind::Depth => f_norm(depth, mask),
        ConditionKind::Normal => {
            let z = z_from_ray_depth(depth, focal_px)?;
            f_d2n(&z, focal_px, Some(mask))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{directional_fd_check, TensorError};

    fn step_image(h: usize, w: usize, cut: usize) -> Tensor {
        let mut data = vec![0.0f32; h * w * 3];
        for i in 0..h {
            for j in cut..w {
                for c in 0..3 {
                    data[(i * w + j) * 3 + c] = 1.0;
                }
            }
        }
        Tensor::from_vec(data, &[h, w, 3]).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Tensor::full(0.6, &[8, 8, 3]);
        let edge = f_canny(&img).unwrap();
        let want = 1.0 / (1.0 + (EDGE_SOFT_K * EDGE_SOFT_TAU).exp());
        // Interior pixels see a zero gradient field (borders feel the
        // zero padding).
        for i in 3..5 {
            for j in 3..5 {
                let got = edge.data.data()[i * 8 + j];
                assert!((got - want).abs() < 1e-4, "got {got} want {want}");
            }
        }
    }

    #[test]
    fn unit_step_sobel_magnitude_is_one() {
        let img = step_image(7, 8, 4);
        let gray = Tensor::from_vec(
            img.data().chunks(3).map(|c| c[0]).collect(),
            &[1, 7, 8],
        )
        .unwrap();
        let m = sobel_magnitude(&gray).unwrap();
        // Columns 3 and 4 straddle the step; interior rows read exactly 1.
        for i in 1..6 {
            for j in [3usize, 4] {
                assert!((m.data()[i * 8 + j] - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn canny_matches_scalar_loop_oracle() {
        // Independent re-implementation with plain loops.
        let (h, w) = (9usize, 11usize);
        let img = step_image(h, w, 5);
        let got = f_canny(&img).unwrap();

        let gray: Vec<f32> = img.data().chunks(3).map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]).collect();
        let g1: Vec<f32> = (-2..=2).map(|x| (-(x * x) as f32 / 2.0).exp()).collect();
        let gn: f32 = g1.iter().sum();
        let mut blur = vec![0.0f32; h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for dy in -2..=2isize {
                    for dx in -2..=2isize {
                        let (y, x) = (i + dy, j + dx);
                        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                            continue;
                        }
                        acc += gray[(y * w as isize + x) as usize]
                            * g1[(dy + 2) as usize] * g1[(dx + 2) as usize] / (gn * gn);
                    }
                }
                blur[(i * w as isize + j) as usize] = acc;
            }
        }
        let kx = [[-1.0f32, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let ky = [[-1.0f32, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let (mut gx, mut gy) = (0.0f32, 0.0f32);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (y, x) = (i + dy, j + dx);
                        if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                            continue;
                        }
                        let v = blur[(y * w as isize + x) as usize];
                        gx += v * kx[(dy + 1) as usize][(dx + 1) as usize] / 4.0;
                        gy += v * ky[(dy + 1) as usize][(dx + 1) as usize] / 4.0;
                    }
                }
                let m = (gx * gx + gy * gy + 1e-12).sqrt();
                let want = 1.0 / (1.0 + (-EDGE_SOFT_K * (m - EDGE_SOFT_TAU)).exp());
                let gotv = got.data.data()[(i * w as isize + j) as usize];
                assert!((gotv - want).abs() < 1e-5, "pixel ({i},{j}): {gotv} vs {want}");
            }
        }
    }

    /// Textured test image: crossed sinusoids keep the Sobel magnitude
    /// bounded away from zero everywhere (the sqrt's high-curvature
    /// region), so finite differences stay trustworthy.
    fn textured_image(hw: usize) -> Tensor {
        Tensor::from_vec(
            (0..hw * hw * 3)
                .map(|i| {
                    let (p, c) = (i / 3, i % 3);
                    let (y, x) = ((p / hw) as f32, (p % hw) as f32);
                    0.5 + 0.25 * (1.3 * x + 0.7 * y + c as f32 * 0.5).sin()
                        + 0.15 * (0.9 * y - 1.1 * x).cos()
                })
                .collect(),
            &[hw, hw, 3],
        )
        .unwrap()
    }

    #[test]
    fn canny_gradient_matches_fd() {
        // Directional probes: a per-coordinate sweep in f32 drowns the
        // small-gradient coordinates in quantization noise.
        let img = textured_image(6);
        let err = directional_fd_check(&|t| f_canny(t).map(|c| c.data)?.mean(), &img, 1e-2, 4, 7)
            .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn sketch_is_frozen_and_bounded() {
        let img = Tensor::from_vec(
            (0..8 * 8 * 3).map(|i| (i as f32 * 0.37).fract()).collect(),
            &[8, 8, 3],
        )
        .unwrap();
        let a = f_sketch(&img).unwrap();
        let b = f_sketch(&img).unwrap();
        assert_eq!(a.data.data(), b.data.data());
        for v in a.data.data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    /// f64 scalar-loop mirror of the sketch net, for the gradient oracle.
    fn sketch_f64(img: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (w1, w2, w3) = sketch_weights();
        let conv = |x: &[f64], cin: usize, wt: &Tensor, cout: usize| -> Vec<f64> {
            let wd = wt.data();
            let mut out = vec![0.0f64; cout * h * w];
            for co in 0..cout {
                for oy in 0..h as isize {
                    for ox in 0..w as isize {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let (iy, ix) = (oy + ky, ox + kx);
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[ci * h * w + (iy * w as isize + ix) as usize]
                                        * wd[((co * cin + ci) * 3 + (ky + 1) as usize) * 3
                                            + (kx + 1) as usize]
                                            as f64;
                                }
                            }
                        }
                        out[co * h * w + (oy * w as isize + ox) as usize] = acc;
                    }
                }
            }
            out
        };
        // [h,w,3] → [3,h,w]
        let mut chw = vec![0.0f64; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                chw[c * h * w + p] = img[p * 3 + c];
            }
        }
        let relu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.max(0.0)).collect() };
        let h1 = relu(conv(&chw, 3, &w1, 8));
        let h2 = relu(conv(&h1, 8, &w2, 8));
        conv(&h2, 8, &w3, 1)
            .into_iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect()
    }

    #[test]
    fn sketch_gradient_matches_f64_oracle() {
        // f32 finite differences cannot resolve this net (relu kinks sit
        // within any usable probe radius), so the oracle is an independent
        // f64 re-implementation differenced at 1e-6.
        let (h, w) = (5usize, 5usize);
        let img = textured_image(5);
        let tape = crate::tensor::Tape::new();
        let leaf = tape.leaf(img.data().to_vec(), &[h, w, 3]).unwrap();
        let loss = f_sketch(&leaf).unwrap().data.mean().unwrap();
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.get(&leaf).unwrap();

        let base: Vec<f64> = img.data().iter().map(|v| *v as f64).collect();
        let loss64 = |x: &[f64]| -> f64 {
            let m = sketch_f64(x, h, w);
            m.iter().sum::<f64>() / m.len() as f64
        };
        let eps = 1e-6f64;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            let fd = (loss64(&p) - loss64(&m)) / (2.0 * eps);
            let rel = (analytic[i] as f64 - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "coord {i}: analytic {} fd {fd}", analytic[i]);
        }
    }

    #[test]
    fn norm_minmax_and_degenerate_rules() {
        let d = Tensor::from_vec(vec![2.0, 4.0], &[1, 2]).unwrap();
        let n = f_norm(&d, &[1.0, 1.0]).unwrap();
        assert_eq!(n.data.data(), &[0.0, 1.0]);

        let d = Tensor::full(3.0, &[2, 2]);
        let n = f_norm(&d, &[1.0; 4]).unwrap();
        assert_eq!(n.data.data(), &[0.0; 4]);

        // Invalid pixels read 1.
        let d = Tensor::from_vec(vec![2.0, 4.0, 9.0], &[1, 3]).unwrap();
        let n = f_norm(&d, &[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(n.data.data(), &[0.0, 1.0, 1.0]);

        assert!(matches!(
            f_norm(&d, &[0.0, 0.0, 0.0]),
            Err(TensorError::EmptyMask { .. })
        ));
    }

    #[test]
    fn norm_affine_invariance() {
        let vals: Vec<f32> = (0..16).map(|i| 1.0 + 0.25 * (i % 5) as f32).collect();
        let d = Tensor::from_vec(vals.clone(), &[4, 4]).unwrap();
        let mask = vec![1.0; 16];
        let base = f_norm(&d, &mask).unwrap();
        // Power-of-two affine parameters keep f32 arithmetic exact.
        let d2 = Tensor::from_vec(vals.iter().map(|v| 2.0 * v + 0.25).collect(), &[4, 4]).unwrap();
        let scaled = f_norm(&d2, &mask).unwrap();
        assert_eq!(base.data.data(), scaled.data.data());

        let d3 = Tensor::from_vec(vals.iter().map(|v| 0.731 * v + 1.37).collect(), &[4, 4]).unwrap();
        let gen = f_norm(&d3, &mask).unwrap();
        for (a, b) in base.data.data().iter().zip(gen.data.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn flat_depth_yields_camera_facing_normals() {
        let d = Tensor::full(2.0, &[8, 8]);
        let n = f_d2n(&d, 32.0, None).unwrap();
        for i in 1..7 {
            for j in 1..7 {
                let base = (i * 8 + j) * 3;
                let v = &n.data.data()[base..base + 3];
                assert!(v[0].abs() < 1e-5 && v[1].abs() < 1e-5 && (v[2] - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normals_unit_norm() {
        let d = Tensor::from_vec(
            (0..64).map(|i| 2.0 + 0.2 * ((i as f32 * 0.7).sin())).collect(),
            &[8, 8],
        )
        .unwrap();
        let n = f_d2n(&d, 32.0, None).unwrap();
        for v in n.data.data().chunks(3) {
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn depth_ramp_matches_analytic_plane_normal() {
        // Plane −Z = d0 + a·X in camera space has unit normal
        // (a,0,1)/√(1+a²); its depth map is D = d0 / (1 − a·u).
        let (h, w, f) = (9usize, 9usize, 16.0f32);
        let (d0, a) = (2.0f32, 0.3f32);
        let mut d = vec![0.0f32; h * w];
        for i in 0..h {
            for j in 0..w {
                let u = (j as f32 + 0.5 - w as f32 / 2.0) / f;
                d[i * w + j] = d0 / (1.0 - a * u);
            }
        }
        let n = f_d2n(&Tensor::from_vec(d, &[h, w]).unwrap(), f, None).unwrap();
        let s = (1.0 + a * a).sqrt();
        let want = [a / s, 0.0, 1.0 / s];
        for i in 2..7 {
            for j in 2..7 {
                let base = (i * w + j) * 3;
                let v = &n.data.data()[base..base + 3];
                let dot = v[0] * want[0] + v[1] * want[1] + v[2] * want[2];
                assert!(dot > 0.9999, "pixel ({i},{j}): {v:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn d2n_gradient_matches_fd_in_interior() {
        // Smooth depth keeps the tangent cross products away from the
        // normalization singularity and the orientation flip.
        let d = Tensor::from_vec(
            (0..36)
                .map(|i| {
                    let (y, x) = ((i / 6) as f32, (i % 6) as f32);
                    2.0 + 0.2 * (0.8 * x).sin() + 0.15 * (0.7 * y).cos()
                })
                .collect(),
            &[6, 6],
        )
        .unwrap();
        let err = directional_fd_check(
            &|t| {
                let n = f_d2n(t, 12.0, None)?;
                // Interior crop: boundary pixels use one-sided differences
                // whose fd behaves differently at the replication seam.
                n.data.slice(0, 1, 4)?.slice(1, 1, 4)?.mean()
            },
            &d,
            2e-3,
            4,
            13,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }
}
