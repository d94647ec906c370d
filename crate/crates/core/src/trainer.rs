//! Cycle training orchestration.
//!
//! One step: generate the triplane from the reference condition, render it
//! at the supervision views and the sampled novel view, re-extract the
//! condition there, regenerate, render back at the reference view, extract
//! again, assemble the losses, and update with Adam. When the sampled view
//! equals the reference the two generation passes collapse into one.
//!
//! Backward defaults to the two-round split with the cut at the condition
//! re-extracted on the novel view (the cycle's intermediate output); the
//! round-one release caps the peak of live activation bytes while leaving
//! the parameter updates within 1e-6 of the single sweep.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

use crate::camera::{sample_novel_view, CameraPose};
use crate::conditions::{extract, extract_from_parts, ConditionKind, ConditionMap};
use crate::dataset::{Dataset, DatasetError, MultiViewSample, Split};
use crate::embed::{Encoders, TextPrompt};
use crate::generator::{register_params, upsample2, Generator, GeneratorConfig};
use crate::losses::{l_total, CycleBatch, LossReport, LossWeights};
use crate::params::{Adam, CheckpointError, ParamStore};
use crate::render::{render, RenderConfig, RenderOutput};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::triplane::{PointDecoder, Triplane, TriplaneField};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f32,
    pub weights: LossWeights,
    pub p_identity: f32,
    pub kind: ConditionKind,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub two_phase_backward: bool,
    /// Ablation: detach the re-extracted condition before the second
    /// generation pass, severing the cycle gradient path.
    pub detach_cycle: bool,
    /// Ground-truth views supervising the render loss each step.
    pub n_gt_views: usize,
    /// Training render resolution (square).
    pub render_res: usize,
    pub render: RenderConfig,
    pub gen: GeneratorConfig,
    pub mlp_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 4e-4,
            weights: LossWeights::default(),
            p_identity: 0.25,
            kind: ConditionKind::Edge,
            seed: 17,
            checkpoint_interval: 0,
            two_phase_backward: true,
            detach_cycle: false,
            n_gt_views: 2,
            render_res: 32,
            render: RenderConfig::default(),
            gen: GeneratorConfig::default(),
            mlp_width: 32,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("steps must be >= 1")]
    NoSteps,
    #[error("dataset has no training scenes")]
    EmptyDataset,
    #[error(
        "loss became NaN at step {step} (render {render}, clip {clip}, cond {cond}, cond3d {cond3d})"
    )]
    NanLoss {
        step: usize,
        render: f32,
        clip: f32,
        cond: f32,
        cond3d: f32,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Freshly initialized trainable parameters (generator + point decoder).
pub fn init_model(cfg: &TrainConfig) -> ParamStore {
    let mut store = ParamStore::new();
    register_params(&mut store, &cfg.gen, cfg.seed ^ 0x9E37);
    PointDecoder::register(&mut store, cfg.seed ^ 0x79B9, 3 * cfg.gen.c_p, cfg.mlp_width);
    store
}

/// One scene prepared for training: generator input at the condition
/// resolution, loss targets at the render resolution.
pub struct SceneSample {
    pub prompt: TextPrompt,
    /// Generator input (condition resolution).
    pub cond_input: ConditionMap,
    /// Loss target (render resolution).
    pub target: ConditionMap,
    /// Reference pose at the condition resolution (generator input pose).
    pub ref_pose: CameraPose,
    /// Reference pose at the render resolution.
    pub ref_pose_small: CameraPose,
    /// All dataset poses at the render resolution with the ground-truth
    /// images box-downsampled to match.
    pub gt_views: Vec<(CameraPose, Tensor)>,
    pub reference_index: usize,
}

fn downsample_box(data: &[f32], h: usize, w: usize, ch: usize, factor: usize) -> Vec<f32> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0f32; oh * ow * ch];
    let inv = 1.0 / (factor * factor) as f32;
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..ch {
                let mut acc = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += data[((y * factor + dy) * w + (x * factor + dx)) * ch + c];
                    }
                }
                out[(y * ow + x) * ch + c] = acc * inv;
            }
        }
    }
    out
}

/// Same pose with a different square pixel resolution.
pub fn resize_pose(pose: &CameraPose, res: usize) -> CameraPose {
    CameraPose {
        transform: pose.transform,
        fov_y: pose.fov_y,
        width: res,
        height: res,
    }
}

/// Build the training view of one dataset scene.
pub fn prepare_scene(
    scene: &MultiViewSample,
    kind: ConditionKind,
    render_res: usize,
    far: f32,
) -> Result<SceneSample, TrainError> {
    let prompt = TextPrompt::new(&scene.caption)?;
    let cond_input = {
        let c = scene.condition(kind);
        ConditionMap {
            kind,
            data: c.data.detach(),
            mask: c.mask.clone(),
        }
    };
    let reference = scene.reference();
    let data_res = reference.pose.height;
    assert!(
        data_res % render_res == 0,
        "render_res must divide the dataset resolution"
    );
    let factor = data_res / render_res;

    // Loss target: the same extractor applied to the reference view
    // downsampled to the render resolution.
    let small_rgb = downsample_box(&reference.rgb, data_res, data_res, 3, factor);
    let small_depth = downsample_box(&reference.depth, data_res, data_res, 1, factor);
    let small_mask: Vec<f32> = small_depth
        .iter()
        .map(|d| if *d < far - 1e-3 { 1.0 } else { 0.0 })
        .collect();
    let ref_pose_small = resize_pose(&reference.pose, render_res);
    let target = extract_from_parts(
        kind,
        &Tensor::from_vec(small_rgb, &[render_res, render_res, 3])?,
        &Tensor::from_vec(small_depth, &[render_res, render_res])?,
        &small_mask,
        ref_pose_small.focal_px(),
    )?;
    let target = ConditionMap {
        kind,
        data: target.data.detach(),
        mask: target.mask,
    };

    let mut gt_views = Vec::with_capacity(scene.views.len());
    for view in &scene.views {
        let img = downsample_box(&view.rgb, data_res, data_res, 3, factor);
        gt_views.push((
            resize_pose(&view.pose, render_res),
            Tensor::from_vec(img, &[render_res, render_res, 3])?,
        ));
    }
    Ok(SceneSample {
        prompt,
        cond_input,
        target,
        ref_pose: reference.pose.clone(),
        ref_pose_small,
        gt_views,
        reference_index: scene.reference_index,
    })
}

/// Nearest-neighbour upsample of a condition map by an integer factor,
/// staying on the tape.
pub fn upsample_condition(map: &ConditionMap, factor: usize) -> Result<ConditionMap, TensorError> {
    let (h, w) = map.resolution();
    let chw = map.chw()?;
    let mut up = chw;
    let mut f = factor;
    while f > 1 {
        up = upsample2(&up)?;
        f /= 2;
    }
    let (oh, ow) = (h * factor, w * factor);
    let data = match map.kind {
        ConditionKind::Normal => {
            // [3, oh, ow] → [oh, ow, 3]
            let c0 = up.slice(0, 0, 1)?.reshape(&[oh * ow, 1])?;
            let c1 = up.slice(0, 1, 1)?.reshape(&[oh * ow, 1])?;
            let c2 = up.slice(0, 2, 1)?.reshape(&[oh * ow, 1])?;
            Tensor::concat(&[&c0, &c1, &c2], 1)?.reshape(&[oh, ow, 3])?
        }
        _ => up.reshape(&[oh, ow])?,
    };
    let mask = map.mask.as_ref().map(|m| {
        let mut out = vec![0.0f32; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = m[(y / factor) * w + x / factor];
            }
        }
        out
    });
    Ok(ConditionMap {
        kind: map.kind,
        data,
        mask,
    })
}

pub struct StepReport {
    pub loss: LossReport,
    pub is_identity: bool,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub semantic: ParamStore,
    opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, store: ParamStore, semantic: ParamStore) -> Trainer {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let opt = Adam::new(cfg.lr);
        Trainer {
            cfg,
            store,
            semantic,
            opt,
            rng,
            step: 0,
        }
    }

    /// Run one cycle step on a prepared scene and update the parameters.
    pub fn cycle_step(&mut self, sample: &SceneSample) -> Result<StepReport, TrainError> {
        let cfg = &self.cfg;
        let tape = Tape::new();
        let leaves = self.store.leaves(&tape)?;
        let gen = Generator::from_leaves(&cfg.gen, &leaves);
        let dec = PointDecoder::from_leaves(&leaves);
        let encoders = Encoders::frozen(&self.semantic);
        let text_emb = encoders.encode_text(&sample.prompt)?;

        // Stage one: generate at the reference view.
        let triplane_i = gen.generate(&sample.cond_input, &text_emb, &sample.ref_pose)?;
        let field_i = TriplaneField {
            triplane: &triplane_i,
            decoder: &dec,
        };

        // Supervision renders of the stage-one triplane.
        let mut gt_renders: Vec<(RenderOutput, Tensor)> = Vec::with_capacity(cfg.n_gt_views);
        let n_views = sample.gt_views.len();
        for _ in 0..cfg.n_gt_views.min(n_views) {
            let v = self.rng.gen_range(0..n_views);
            let (pose, gt) = &sample.gt_views[v];
            let mut jitter_rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
            let out = render(&field_i, pose, &cfg.render, Some(&mut || jitter_rng.gen()))?;
            gt_renders.push((out, gt.clone()));
        }

        // Sample the novel view.
        let fake_grid = crate::camera::ViewGrid {
            poses: sample.gt_views.iter().map(|(p, _)| p.clone()).collect(),
            labels: vec![
                crate::camera::ViewLabel {
                    elevation_deg: 0.0,
                    azimuth_deg: 0.0,
                    radius: 0.0
                };
                n_views
            ],
        };
        let (novel_idx, is_identity) = sample_novel_view(
            &mut self.rng,
            &fake_grid,
            cfg.p_identity,
            sample.reference_index,
        );

        let mut cut_tensor: Option<Tensor> = None;
        let batch = if is_identity {
            let mut jitter_rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
            let out = render(
                &field_i,
                &sample.ref_pose_small,
                &cfg.render,
                Some(&mut || jitter_rng.gen()),
            )?;
            let cond_identity = extract(cfg.kind, &out)?;
            CycleBatch {
                triplane_i,
                render_r: None,
                render_i: None,
                cond_cycled: None,
                render_identity: Some(out),
                cond_identity: Some(cond_identity),
                gt_renders,
                is_identity: true,
            }
        } else {
            let novel_pose = &sample.gt_views[novel_idx].0;
            let mut jitter_rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
            let render_r = render(&field_i, novel_pose, &cfg.render, Some(&mut || {
                jitter_rng.gen()
            }))?;
            let cond_r = extract(cfg.kind, &render_r)?;
            cut_tensor = Some(cond_r.data.clone());

            // Stage two: feed the re-extracted condition back in.
            let factor = cfg.gen.cond_res / cfg.render_res;
            let mut cond_up = upsample_condition(&cond_r, factor)?;
            if cfg.detach_cycle {
                cond_up = ConditionMap {
                    kind: cond_up.kind,
                    data: cond_up.data.detach(),
                    mask: cond_up.mask,
                };
            }
            let triplane_r = gen.generate(&cond_up, &text_emb, novel_pose)?;
            let field_r = TriplaneField {
                triplane: &triplane_r,
                decoder: &dec,
            };
            let mut jitter_rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
            let render_i = render(
                &field_r,
                &sample.ref_pose_small,
                &cfg.render,
                Some(&mut || jitter_rng.gen()),
            )?;
            let cond_cycled = extract(cfg.kind, &render_i)?;
            CycleBatch {
                triplane_i,
                render_r: Some(render_r),
                render_i: Some(render_i),
                cond_cycled: Some(cond_cycled),
                render_identity: None,
                cond_identity: None,
                gt_renders,
                is_identity: false,
            }
        };

        let report = l_total(
            &batch,
            cfg.kind,
            &sample.target,
            &sample.prompt,
            &encoders,
            &cfg.weights,
        )?;
        let total = report.total.clone();
        if !total.item()?.is_finite() {
            return Err(TrainError::NanLoss {
                step: self.step,
                render: report.render,
                clip: report.clip,
                cond: report.cond,
                cond3d: report.cond3d,
            });
        }
        // The batch's tensor handles are dropped before backward so the
        // cut release actually frees the stage-two buffers.
        drop(batch);

        let use_two_phase =
            cfg.two_phase_backward && !cfg.detach_cycle && cut_tensor.is_some();
        let grads = if use_two_phase {
            let cut = cut_tensor.as_ref().expect("checked above");
            let cutset = tape.backward_to_cut(&total, &[cut])?;
            tape.resume_backward(cutset)?
        } else {
            tape.backward(&total)?
        };
        self.opt.step(&mut self.store, &leaves.grad_map(&grads));
        self.step += 1;
        Ok(StepReport {
            loss: report,
            is_identity,
        })
    }
}

/// CSV header of the training log.
pub const LOG_HEADER: &str = "step,l_render,l_clip,l_cond,l_cond3d,l_total";

/// Full training run: loads the train split, iterates cycle steps with
/// seeded scene selection, logs every step, and writes the final
/// checkpoint (plus periodic ones when configured).
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    semantic: &ParamStore,
    out_dir: &Path,
) -> Result<ParamStore, TrainError> {
    if cfg.steps == 0 {
        return Err(TrainError::NoSteps);
    }
    let train_ids = dataset.indices(Split::Train);
    if train_ids.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let far = dataset.manifest.config.far;
    let mut samples = Vec::with_capacity(train_ids.len());
    for &i in &train_ids {
        let scene = dataset.load_scene(i)?;
        samples.push(prepare_scene(&scene, cfg.kind, cfg.render_res, far)?);
    }

    let store = init_model(cfg);
    let mut trainer = Trainer::new(cfg.clone(), store, semantic.clone());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51CE);

    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let log_path = out_dir.join("training_log.csv");
    let mut log = std::fs::File::create(&log_path).map_err(|e| TrainError::Io {
        path: log_path.display().to_string(),
        source: e,
    })?;
    writeln!(log, "{}", LOG_HEADER).map_err(|e| TrainError::Io {
        path: log_path.display().to_string(),
        source: e,
    })?;

    let mut order: Vec<usize> = Vec::new();
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut order_rng);
        }
        let scene_idx = order.pop().expect("refilled above");
        let report = trainer.cycle_step(&samples[scene_idx])?;
        writeln!(
            log,
            "{},{},{},{},{},{}",
            step,
            report.loss.render,
            report.loss.clip,
            report.loss.cond,
            report.loss.cond3d,
            report.loss.total.item()?
        )
        .map_err(|e| TrainError::Io {
            path: log_path.display().to_string(),
            source: e,
        })?;
        if cfg.checkpoint_interval > 0
            && (step + 1) % cfg.checkpoint_interval == 0
            && step + 1 < cfg.steps
        {
            trainer
                .store
                .save(&out_dir.join(format!("step_{:06}", step + 1)), "model", (step + 1) as u64)?;
        }
    }
    trainer.store.save(out_dir, "model", cfg.steps as u64)?;
    Ok(trainer.store)
}

/// Fit a free triplane (plus decoder) to a single ground-truth view by
/// gradient descent on image and silhouette error. Used to validate the
/// renderer against the analytic oracle.
pub fn overfit_single_view(
    gt_rgb: &[f32],
    gt_mask: &[f32],
    pose: &CameraPose,
    cfg: &RenderConfig,
    plane_shape: &[usize],
    steps: usize,
    lr: f32,
    seed: u64,
) -> Result<(ParamStore, f32), TrainError> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = plane_shape.iter().product();
    store.insert(
        "planes",
        (0..n).map(|_| rng.gen_range(-0.05..0.05f32)).collect(),
        plane_shape,
    );
    PointDecoder::register(&mut store, seed ^ 0x5EED, 3 * plane_shape[1], 32);
    let mut opt = Adam::new(lr);
    let (h, w) = (pose.height, pose.width);
    let gt_img = Tensor::from_vec(gt_rgb.to_vec(), &[h, w, 3])?;
    let gt_alpha = Tensor::from_vec(gt_mask.to_vec(), &[h, w])?;
    let mut last = f32::INFINITY;
    for _ in 0..steps {
        let tape = Tape::new();
        let leaves = store.leaves(&tape)?;
        let planes = leaves.get("planes").clone();
        let dec = PointDecoder::from_leaves(&leaves);
        let tp = Triplane::new(planes, 1.0);
        let field = TriplaneField {
            triplane: &tp,
            decoder: &dec,
        };
        let out = render(&field, pose, cfg, None)?;
        let img_loss = crate::losses::mse(&out.image, &gt_img, None)?;
        let mask_loss = crate::losses::mse(&out.alpha, &gt_alpha, None)?;
        let loss = img_loss.add(&mask_loss.scale(0.5)?)?;
        last = loss.item()?;
        let grads = tape.backward(&loss)?;
        opt.step(&mut store, &leaves.grad_map(&grads));
    }
    Ok((store, last))
}
