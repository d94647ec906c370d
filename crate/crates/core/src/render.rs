//! Differentiable volume rendering of RGB, depth, and alpha from a
//! triplane field.
//!
//! Per ray: uniform bins over [near, far] with stratified jitter during
//! training (midpoints otherwise), transmittance T_k = exp(−Σ_{j<k} σ_j Δ),
//! α_k = 1 − exp(−σ_k Δ), weights w_k = T_k α_k. Color composites against
//! the background, depth is the expected termination distance composited
//! against `far`, alpha is the total weight.


use crate::camera::CameraPose;
use crate::tensor::{Result, Tensor};
use crate::triplane::TriplaneField;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub near: f32,
    pub far: f32,
    pub background: [f32; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        // Covers the unit-bound cube from the default orbit radius 2.5.
        RenderConfig {
            n_samples: 48,
            near: 0.5,
            far: 4.5,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 || !(0.0 < self.near && self.near < self.far) {
            return Err(crate::tensor::TensorError::Unsupported {
                op: "render",
                detail: format!(
                    "need n_samples >= 2 and 0 < near < far, got {} [{}, {}]",
                    self.n_samples, self.near, self.far
                ),
            });
        }
        Ok(())
    }
}

/// Rendered buffers, row-major over pixels; on the tape whenever the field
/// is.
pub struct RenderOutput {
    /// [h, w, 3] in [0,1].
    pub image: Tensor,
    /// [h, w], expected termination in [near, far].
    pub depth: Tensor,
    /// [h, w] total ray weight in [0,1].
    pub alpha: Tensor,
    pub height: usize,
    pub width: usize,
    /// Focal length of the rendering camera in pixels; downstream
    /// extractors need it to back-project the depth map.
    pub focal_px: f32,
}

impl RenderOutput {
    /// Foreground mask at the conventional 0.5 alpha threshold.
    pub fn mask(&self) -> Vec<f32> {
        self.alpha
            .data()
            .iter()
            .map(|a| if *a > 0.5 { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Alpha-composite per-sample color/density into pixel buffers.
///
/// `color` [r, s, 3]; `sigma` [r, s]; `ts` flat [r·s] sample distances;
/// `delta` the uniform bin width. Exposed so oracle tests can drive the
/// quadrature with hand-built fields.
pub fn composite(
    color: &Tensor,
    sigma: &Tensor,
    ts: &[f32],
    delta: f32,
    cfg: &RenderConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (r, s) = (sigma.shape()[0], sigma.shape()[1]);
    let sd = sigma.scale(delta)?;
    let alpha_k = sd.scale(-1.0)?.exp()?.scale(-1.0)?.offset(1.0)?; // 1 − e^{−σΔ}
    let trans = sd.cumsum_exclusive()?.scale(-1.0)?.exp()?; // T_k
    let w = trans.mul(&alpha_k)?; // [r, s]

    let acc = w.sum_axis(1)?; // [r]
    let leftover = acc.scale(-1.0)?.offset(1.0)?; // 1 − Σw

    let w3 = w.reshape(&[r, s, 1])?.broadcast_to(&[r, s, 3])?;
    let fg = w3.mul(color)?.sum_axis(1)?; // [r, 3]
    let bg = Tensor::from_vec(cfg.background.to_vec(), &[1, 3])?.broadcast_to(&[r, 3])?;
    let image = fg.add(
        &leftover
            .reshape(&[r, 1])?
            .broadcast_to(&[r, 3])?
            .mul(&bg)?,
    )?;

    let t_tensor = Tensor::from_vec(ts.to_vec(), &[r, s])?;
    let depth = w
        .mul(&t_tensor)?
        .sum_axis(1)?
        .add(&leftover.scale(cfg.far)?)?;

    Ok((image, depth, acc))
}

/// Render the field from `pose`. Pass an rng to jitter sample positions
/// within their bins (training); without one, bin midpoints are used, so
/// evaluation renders are deterministic.
pub fn render(
    field: &TriplaneField,
    pose: &CameraPose,
    cfg: &RenderConfig,
    jitter: Option<&mut dyn FnMut() -> f32>,
) -> Result<RenderOutput> {
    cfg.validate()?;
    let rays = pose.rays();
    let (h, w, s) = (rays.height, rays.width, cfg.n_samples);
    let r = h * w;
    let delta = (cfg.far - cfg.near) / s as f32;

    let mut ts = vec![0.0f32; r * s];
    match jitter {
        Some(u) => {
            for t in ts.iter_mut() {
                *t = u();
            }
        }
        None => {
            for t in ts.iter_mut() {
                *t = 0.5;
            }
        }
    }
    for ray in 0..r {
        for k in 0..s {
            let i = ray * s + k;
            ts[i] = cfg.near + (k as f32 + ts[i]) * delta;
        }
    }

    let mut points = vec![0.0f32; r * s * 3];
    for ray in 0..r {
        let o = &rays.origins[ray * 3..ray * 3 + 3];
        let d = &rays.dirs[ray * 3..ray * 3 + 3];
        for k in 0..s {
            let t = ts[ray * s + k];
            let base = (ray * s + k) * 3;
            points[base] = o[0] + t * d[0];
            points[base + 1] = o[1] + t * d[1];
            points[base + 2] = o[2] + t * d[2];
        }
    }

    let batch = field.query(&points)?;
    let color = batch.color.reshape(&[r, s, 3])?;
    let sigma = batch.sigma.reshape(&[r, s])?;
    let (image, depth, alpha) = composite(&color, &sigma, &ts, delta, cfg)?;
    Ok(RenderOutput {
        image: image.reshape(&[h, w, 3])?,
        depth: depth.reshape(&[h, w])?,
        alpha: alpha.reshape(&[h, w])?,
        height: h,
        width: w,
        focal_px: pose.focal_px(),
    })
}

/// Stage-one render of `field_i` at the sampled view plus stage-two render
/// of `field_r` back at the reference view; a pure composition of
/// [`render`].
pub fn render_both_stages(
    field_i: &TriplaneField,
    field_r: &TriplaneField,
    pose_r: &CameraPose,
    pose_i: &CameraPose,
    cfg: &RenderConfig,
) -> Result<(RenderOutput, RenderOutput)> {
    let first = render(field_i, pose_r, cfg, None)?;
    let second = render(field_r, pose_i, cfg, None)?;
    Ok((first, second))
}
