//! Training losses: condition cycle consistency (2D and 3D feedback),
//! rendering regularization, semantic consistency, and their weighted
//! total.
//!
//! One novel view is sampled per step, so each loss carries that single
//! view's term. When the sampled view equals the reference view the cycle
//! degenerates to a single generation pass and the identity-branch fields
//! are populated instead of the two-stage ones.

use crate::conditions::{f_norm, z_from_ray_depth, ConditionKind, ConditionMap, f_d2n};
use crate::embed::{cosine, Encoders, TextPrompt};
use crate::render::RenderOutput;
use crate::tensor::{Result as TResult, Tensor, TensorError};
use crate::triplane::Triplane;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Semantic-consistency weight.
    pub alpha: f32,
    /// Condition-cycle weight.
    pub lambda: f32,
    /// 3D condition-feedback weight.
    pub beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 5.0,
            lambda: 1.0,
            beta: 0.1,
        }
    }
}

/// Everything one cycle step produced. Exactly one of the two-stage
/// fields (`render_i`/`cond_cycled`) or the identity fields
/// (`render_identity`/`cond_identity`) is populated.
pub struct CycleBatch {
    pub triplane_i: Triplane,
    /// Stage-one render at the sampled view (absent on identity steps).
    pub render_r: Option<RenderOutput>,
    /// Stage-two render back at the reference view.
    pub render_i: Option<RenderOutput>,
    /// Condition re-extracted from the stage-two render.
    pub cond_cycled: Option<ConditionMap>,
    /// Identity-branch render at the reference view.
    pub render_identity: Option<RenderOutput>,
    /// Condition extracted on the identity branch.
    pub cond_identity: Option<ConditionMap>,
    /// Ground-truth supervision: renders of the stage-one triplane at
    /// dataset views, paired with the ground-truth images.
    pub gt_renders: Vec<(RenderOutput, Tensor)>,
    pub is_identity: bool,
}

impl CycleBatch {
    pub fn validate(&self) -> TResult<()> {
        let two_stage = self.render_i.is_some() && self.cond_cycled.is_some();
        let identity = self.render_identity.is_some() && self.cond_identity.is_some();
        if two_stage == identity {
            return Err(TensorError::Unsupported {
                op: "cycle_batch",
                detail: "exactly one of two-stage or identity outputs must be populated".into(),
            });
        }
        Ok(())
    }
}

/// Mean squared error between two equally shaped maps, optionally
/// restricted to a validity mask (all channels of a masked pixel count).
pub fn mse(a: &Tensor, b: &Tensor, mask: Option<&[f32]>) -> TResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let d = a.sub(b)?;
    let sq = d.mul(&d)?;
    match mask {
        None => sq.mean(),
        Some(m) => {
            let pixels = m.len();
            let channels = a.numel() / pixels;
            let count: f32 = m.iter().sum::<f32>() * channels as f32;
            if count == 0.0 {
                return Err(TensorError::EmptyMask { op: "mse" });
            }
            let mut expanded = Vec::with_capacity(a.numel());
            for v in m {
                for _ in 0..channels {
                    expanded.push(*v);
                }
            }
            let mask_t = Tensor::from_vec(expanded, a.shape())?;
            sq.mul(&mask_t)?.sum()?.scale(1.0 / count)
        }
    }
}

fn intersect_masks(a: &ConditionMap, b: &ConditionMap) -> Option<Vec<f32>> {
    match (&a.mask, &b.mask) {
        (None, None) => None,
        (Some(m), None) | (None, Some(m)) => Some(m.clone()),
        (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(a, b)| a * b).collect()),
    }
}

/// Condition cycle consistency: the re-extracted condition against the
/// input condition at the reference view. Uses the cycled map on two-stage
/// steps and the identity-branch map otherwise.
pub fn l_cond(batch: &CycleBatch, target: &ConditionMap) -> TResult<Tensor> {
    let got = batch
        .cond_cycled
        .as_ref()
        .or(batch.cond_identity.as_ref())
        .ok_or(TensorError::Unsupported {
            op: "l_cond",
            detail: "no extracted condition in batch".into(),
        })?;
    mse(&got.data, &target.data, intersect_masks(got, target).as_deref())
}

/// 3D depth feedback: normalized rendered depth against the depth
/// condition, on the valid mask.
pub fn l_cond_d(batch: &CycleBatch, target: &ConditionMap) -> TResult<Tensor> {
    let render = batch
        .render_i
        .as_ref()
        .or(batch.render_identity.as_ref())
        .ok_or(TensorError::Unsupported {
            op: "l_cond_d",
            detail: "no reference-view render in batch".into(),
        })?;
    let normed = f_norm(&render.depth, &render.mask())?;
    mse(
        &normed.data,
        &target.data,
        intersect_masks(&normed, target).as_deref(),
    )
}

/// 3D normal feedback: depth-derived normals against the normal
/// condition, on the valid mask.
pub fn l_cond_n(batch: &CycleBatch, target: &ConditionMap) -> TResult<Tensor> {
    let render = batch
        .render_i
        .as_ref()
        .or(batch.render_identity.as_ref())
        .ok_or(TensorError::Unsupported {
            op: "l_cond_n",
            detail: "no reference-view render in batch".into(),
        })?;
    let mask = render.mask();
    let z = z_from_ray_depth(&render.depth, render.focal_px)?;
    let derived = f_d2n(&z, render.focal_px, Some(&mask))?;
    mse(
        &derived.data,
        &target.data,
        intersect_masks(&derived, target).as_deref(),
    )
}

/// Rendering regularization: stage-one renders against ground-truth
/// images, summed over the supervision views (each term mean-reduced).
/// Only the stage-one triplane appears here, so the second generation
/// pass receives no gradient from this loss.
pub fn l_render(batch: &CycleBatch) -> TResult<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for (render, gt) in &batch.gt_renders {
        total = total.add(&mse(&render.image, gt, None)?)?;
    }
    Ok(total)
}

/// Semantic consistency: cosine distance between the prompt embedding and
/// the embeddings of the cycle's rendered images (stage one at the sampled
/// view; stage two back at the reference view when present).
pub fn l_clip(batch: &CycleBatch, prompt: &TextPrompt, encoders: &Encoders) -> TResult<Tensor> {
    let text = encoders.encode_text(prompt)?;
    let mut total = Tensor::scalar(0.0);
    let mut push = |img: &Tensor| -> TResult<()> {
        let emb = encoders.encode_image(img)?;
        let dist = cosine(&text, &emb)?.scale(-1.0)?.offset(1.0)?;
        total = total.add(&dist)?;
        Ok(())
    };
    if let Some(r) = &batch.render_r {
        push(&r.image)?;
    }
    if let Some(r) = &batch.render_identity {
        push(&r.image)?;
    }
    if let Some(r) = &batch.render_i {
        push(&r.image)?;
    }
    Ok(total)
}

/// View cycle consistency: rendering loss plus weighted semantic loss.
pub fn l_view(
    batch: &CycleBatch,
    prompt: &TextPrompt,
    encoders: &Encoders,
    alpha: f32,
) -> TResult<(Tensor, Tensor, Tensor)> {
    let render = l_render(batch)?;
    let clip = l_clip(batch, prompt, encoders)?;
    let view = render.add(&clip.scale(alpha)?)?;
    Ok((view, render, clip))
}

/// All loss terms of one step, as tensors (for backward) and scalars (for
/// logging).
pub struct LossReport {
    pub total: Tensor,
    pub render: f32,
    pub clip: f32,
    pub cond: f32,
    pub cond3d: f32,
}

/// The full objective: view consistency plus λ-weighted condition cycle
/// consistency, plus the β-weighted 3D feedback matching the condition
/// kind (depth and normal kinds only).
pub fn l_total(
    batch: &CycleBatch,
    kind: ConditionKind,
    target: &ConditionMap,
    prompt: &TextPrompt,
    encoders: &Encoders,
    weights: &LossWeights,
) -> TResult<LossReport> {
    batch.validate()?;
    let (view, render, clip) = l_view(batch, prompt, encoders, weights.alpha)?;
    let cond = l_cond(batch, target)?;
    let mut total = view.add(&cond.scale(weights.lambda)?)?;
    let cond3d = match kind {
        ConditionKind::Depth => Some(l_cond_d(batch, target)?),
        ConditionKind::Normal => Some(l_cond_n(batch, target)?),
        _ => None,
    };
    if let Some(c3) = &cond3d {
        total = total.add(&c3.scale(weights.beta)?)?;
    }
    Ok(LossReport {
        render: render.item()?,
        clip: clip.item()?,
        cond: cond.item()?,
        cond3d: cond3d.as_ref().map(|t| t.item()).transpose()?.unwrap_or(0.0),
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::init_params;

    fn map(kind: ConditionKind, data: Vec<f32>, h: usize, w: usize) -> ConditionMap {
        let shape: Vec<usize> = if kind == ConditionKind::Normal {
            vec![h, w, 3]
        } else {
            vec![h, w]
        };
        ConditionMap {
            kind,
            data: Tensor::from_vec(data, &shape).unwrap(),
            mask: None,
        }
    }

    fn fake_render(image: Tensor, depth: Tensor, h: usize, w: usize) -> RenderOutput {
        let alpha = Tensor::from_vec(
            depth.data().iter().map(|d| if *d < 4.4 { 1.0 } else { 0.0 }).collect(),
            &[h, w],
        )
        .unwrap();
        RenderOutput {
            image,
            depth,
            alpha,
            height: h,
            width: w,
            focal_px: 16.0,
        }
    }

    fn empty_batch() -> CycleBatch {
        CycleBatch {
            triplane_i: Triplane::new(Tensor::zeros(&[3, 2, 4, 4]), 1.0),
            render_r: None,
            render_i: None,
            cond_cycled: None,
            render_identity: None,
            cond_identity: None,
            gt_renders: vec![],
            is_identity: false,
        }
    }

    #[test]
    fn cond_loss_zero_and_offset() {
        let (h, w) = (4usize, 4usize);
        let data: Vec<f32> = (0..16).map(|i| 0.3 + 0.02 * i as f32).collect();
        let target = map(ConditionKind::Edge, data.clone(), h, w);
        let mut batch = empty_batch();
        batch.cond_cycled = Some(map(ConditionKind::Edge, data.clone(), h, w));
        assert_eq!(l_cond(&batch, &target).unwrap().item().unwrap(), 0.0);

        batch.cond_cycled = Some(map(
            ConditionKind::Edge,
            data.iter().map(|v| v + 0.1).collect(),
            h,
            w,
        ));
        let got = l_cond(&batch, &target).unwrap().item().unwrap();
        assert!((got - 0.01).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn cond_loss_matches_scalar_loop_oracle() {
        let (h, w) = (5usize, 3usize);
        let a: Vec<f32> = (0..15).map(|i| (i as f32 * 0.71).sin()).collect();
        let b: Vec<f32> = (0..15).map(|i| (i as f32 * 0.37).cos()).collect();
        let target = map(ConditionKind::Sketch, a.clone(), h, w);
        let mut batch = empty_batch();
        batch.cond_cycled = Some(map(ConditionKind::Sketch, b.clone(), h, w));
        let got = l_cond(&batch, &target).unwrap().item().unwrap();
        let want: f32 =
            a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>() / 15.0;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn cond_d_affine_invariance() {
        let (h, w) = (4usize, 4usize);
        let depth: Vec<f32> = (0..16).map(|i| 2.0 + 0.1 * (i % 7) as f32).collect();
        let mask = vec![1.0f32; 16];
        let target = f_norm(&Tensor::from_vec(depth.clone(), &[h, w]).unwrap(), &mask).unwrap();
        // Rendered depth is an affine rescaling of the condition depth.
        let rescaled: Vec<f32> = depth.iter().map(|v| 0.5 * v + 0.25).collect();
        let mut batch = empty_batch();
        batch.render_i = Some(fake_render(
            Tensor::zeros(&[h, w, 3]),
            Tensor::from_vec(rescaled, &[h, w]).unwrap(),
            h,
            w,
        ));
        let got = l_cond_d(&batch, &target).unwrap().item().unwrap();
        assert!(got.abs() < 1e-10, "got {got}");
    }

    #[test]
    fn cond_d_constant_depth_against_zero_target() {
        let (h, w) = (4usize, 4usize);
        let target = map(ConditionKind::Depth, vec![0.0; 16], h, w);
        let mut batch = empty_batch();
        batch.render_i = Some(fake_render(
            Tensor::zeros(&[h, w, 3]),
            Tensor::full(2.0, &[h, w]),
            h,
            w,
        ));
        assert_eq!(l_cond_d(&batch, &target).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn render_loss_zero_when_equal_and_oracle_match() {
        let (h, w) = (4usize, 4usize);
        let img: Vec<f32> = (0..h * w * 3).map(|i| (i as f32 * 0.13).fract()).collect();
        let gt: Vec<f32> = (0..h * w * 3).map(|i| (i as f32 * 0.29).fract()).collect();
        let mut batch = empty_batch();
        batch.gt_renders = vec![(
            fake_render(
                Tensor::from_vec(img.clone(), &[h, w, 3]).unwrap(),
                Tensor::full(4.5, &[h, w]),
                h,
                w,
            ),
            Tensor::from_vec(img.clone(), &[h, w, 3]).unwrap(),
        )];
        assert_eq!(l_render(&batch).unwrap().item().unwrap(), 0.0);

        batch.gt_renders[0].1 = Tensor::from_vec(gt.clone(), &[h, w, 3]).unwrap();
        let got = l_render(&batch).unwrap().item().unwrap();
        let want: f32 = img
            .iter()
            .zip(&gt)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            / (h * w * 3) as f32;
        assert!((got - want).abs() < 1e-6);
    }

    #[test]
    fn clip_loss_bounds_and_weighting() {
        let store = init_params(2);
        let enc = Encoders::frozen(&store);
        let prompt = TextPrompt::new("a red sphere").unwrap();
        let (h, w) = (8usize, 8usize);
        let mut batch = empty_batch();
        batch.render_r = Some(fake_render(
            Tensor::full(0.4, &[h, w, 3]),
            Tensor::full(2.0, &[h, w]),
            h,
            w,
        ));
        batch.render_i = Some(fake_render(
            Tensor::full(0.7, &[h, w, 3]),
            Tensor::full(2.0, &[h, w]),
            h,
            w,
        ));
        let clip = l_clip(&batch, &prompt, &enc).unwrap().item().unwrap();
        // Two cosine-distance terms, each in [0, 2].
        assert!((0.0..=4.0).contains(&clip));

        let (view, render, clip_t) = l_view(&batch, &prompt, &enc, 0.0).unwrap();
        assert_eq!(view.item().unwrap(), render.item().unwrap());
        let (view5, render5, clip5) = l_view(&batch, &prompt, &enc, 5.0).unwrap();
        let want = render5.item().unwrap() + 5.0 * clip5.item().unwrap();
        assert!((view5.item().unwrap() - want).abs() < 1e-5);
        let _ = clip_t;
    }

    #[test]
    fn total_loss_case_split() {
        let store = init_params(2);
        let enc = Encoders::frozen(&store);
        let prompt = TextPrompt::new("a blue cube").unwrap();
        let (h, w) = (8usize, 8usize);
        let depth: Vec<f32> = (0..64).map(|i| 2.0 + 0.01 * i as f32).collect();
        let mk_batch = || {
            let mut b = empty_batch();
            b.render_i = Some(fake_render(
                Tensor::full(0.6, &[h, w, 3]),
                Tensor::from_vec(depth.clone(), &[h, w]).unwrap(),
                h,
                w,
            ));
            b
        };
        let weights = LossWeights {
            alpha: 0.0,
            lambda: 1.0,
            beta: 0.1,
        };

        // Edge kind: no 3D term.
        let mut b = mk_batch();
        b.cond_cycled = Some(map(ConditionKind::Edge, vec![0.2; 64], h, w));
        let target_e = map(ConditionKind::Edge, vec![0.5; 64], h, w);
        let rep = l_total(&b, ConditionKind::Edge, &target_e, &prompt, &enc, &weights).unwrap();
        assert_eq!(rep.cond3d, 0.0);
        let want = rep.render + weights.lambda * rep.cond;
        assert!((rep.total.item().unwrap() - want).abs() < 1e-6);

        // Depth kind: includes β·l_cond_d.
        let mut b = mk_batch();
        let normed = f_norm(&Tensor::from_vec(depth.clone(), &[h, w]).unwrap(), &vec![1.0; 64])
            .unwrap();
        b.cond_cycled = Some(ConditionMap {
            kind: ConditionKind::Depth,
            data: normed.data.detach(),
            mask: normed.mask.clone(),
        });
        let target_d = ConditionMap {
            kind: ConditionKind::Depth,
            data: normed.data.detach(),
            mask: normed.mask.clone(),
        };
        let rep = l_total(&b, ConditionKind::Depth, &target_d, &prompt, &enc, &weights).unwrap();
        let want = rep.render + weights.lambda * rep.cond + weights.beta * rep.cond3d;
        assert!((rep.total.item().unwrap() - want).abs() < 1e-6);

        // All-zero weights reduce to the render loss.
        let z = LossWeights {
            alpha: 0.0,
            lambda: 0.0,
            beta: 0.0,
        };
        let mut b = mk_batch();
        b.cond_cycled = Some(map(ConditionKind::Edge, vec![0.2; 64], h, w));
        let rep = l_total(&b, ConditionKind::Edge, &target_e, &prompt, &enc, &z).unwrap();
        assert_eq!(rep.total.item().unwrap(), rep.render);
    }

    #[test]
    fn batch_validation_rejects_ambiguous_population() {
        let b = empty_batch();
        assert!(b.validate().is_err());
    }
}
