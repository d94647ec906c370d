//! Controllability metrics: PSNR/SSIM/MSE over condition maps, R-MSE,
//! DN-CON, and embedding-cosine scores, plus the evaluation driver.
//!
//! Everything here computes in plain f64 loops, independent of the tensor
//! ops the losses use — the two routes cross-check each other. Evaluation
//! renders use midpoint sampling, so reports are bitwise reproducible.
//! The embedding scores come from the toy contrastive encoders and are
//! labeled as stand-ins in the report; they are not comparable to scores
//! from large pretrained models.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::v_dot;
use crate::conditions::{extract, extract_from_parts, ConditionKind, ConditionMap};
use crate::dataset::{Dataset, DatasetError, MultiViewSample, Split};
use crate::embed::{cosine, Encoders, TextPrompt};
use crate::generator::{Generator, GeneratorConfig};
use crate::params::ParamStore;
use crate::render::{render, RenderConfig, RenderOutput};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::resize_pose;
use crate::triplane::{PointDecoder, TriplaneField};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean squared error in f64, optionally masked (mask is per pixel; all
/// channels of a masked pixel count).
pub fn mse_masked(a: &[f32], b: &[f32], mask: Option<&[f32]>) -> Result<f64, MetricError> {
    assert_eq!(a.len(), b.len());
    match mask {
        None => {
            let mut acc = 0.0f64;
            for (x, y) in a.iter().zip(b) {
                let d = *x as f64 - *y as f64;
                acc += d * d;
            }
            Ok(acc / a.len() as f64)
        }
        Some(m) => {
            let channels = a.len() / m.len();
            let mut acc = 0.0f64;
            let mut count = 0.0f64;
            for (p, mv) in m.iter().enumerate() {
                if *mv < 0.5 {
                    continue;
                }
                for c in 0..channels {
                    let i = p * channels + c;
                    let d = a[i] as f64 - b[i] as f64;
                    acc += d * d;
                    count += 1.0;
                }
            }
            if count == 0.0 {
                return Err(MetricError::EmptyMask);
            }
            Ok(acc / count)
        }
    }
}

/// PSNR against data range 1; zero MSE reports +inf.
pub fn psnr_of_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// SSIM with a Gaussian window over all fully interior window positions,
/// K1 = 0.01, K2 = 0.03, data range 1.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    assert_eq!(a.len(), h * w);
    assert_eq!(b.len(), h * w);
    let r = SSIM_WINDOW / 2;
    let mut kernel = [0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let mut ksum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - r as f64;
            let dx = x as f64 - r as f64;
            let v = (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            kernel[y * SSIM_WINDOW + x] = v;
            ksum += v;
        }
    }
    for v in kernel.iter_mut() {
        *v /= ksum;
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut acc = 0.0f64;
    let mut count = 0usize;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        // Degenerate small images: global statistics.
        let mean = |v: &[f32]| v.iter().map(|x| *x as f64).sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(a), mean(b));
        let mut va = 0.0;
        let mut vb = 0.0;
        let mut cov = 0.0;
        for (x, y) in a.iter().zip(b) {
            va += (*x as f64 - ma).powi(2);
            vb += (*y as f64 - mb).powi(2);
            cov += (*x as f64 - ma) * (*y as f64 - mb);
        }
        let n = a.len() as f64;
        return ((2.0 * ma * mb + c1) * (2.0 * cov / n + c2))
            / ((ma * ma + mb * mb + c1) * (va / n + vb / n + c2));
    }
    for cy in r..h - r {
        for cx in r..w - r {
            let mut ma = 0.0f64;
            let mut mb = 0.0f64;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let p = (cy + ky - r) * w + (cx + kx - r);
                    let kv = kernel[ky * SSIM_WINDOW + kx];
                    ma += kv * a[p] as f64;
                    mb += kv * b[p] as f64;
                }
            }
            let mut va = 0.0f64;
            let mut vb = 0.0f64;
            let mut cov = 0.0f64;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let p = (cy + ky - r) * w + (cx + kx - r);
                    let kv = kernel[ky * SSIM_WINDOW + kx];
                    let da = a[p] as f64 - ma;
                    let db = b[p] as f64 - mb;
                    va += kv * da * da;
                    vb += kv * db * db;
                    cov += kv * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("metric mask has no valid pixels")]
    EmptyMask,
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Condition-space comparison of a render against a ground-truth view:
/// both sides go through the same extractor.
pub struct CondComparison {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

pub fn compare_condition(
    kind: ConditionKind,
    rendered: &RenderOutput,
    gt: &ConditionMap,
) -> Result<CondComparison, MetricError> {
    let got = extract(kind, rendered)?;
    let mask = match (&got.mask, &gt.mask) {
        (None, None) => None,
        (Some(m), None) | (None, Some(m)) => Some(m.clone()),
        (Some(x), Some(y)) => Some(x.iter().zip(y).map(|(a, b)| a * b).collect::<Vec<f32>>()),
    };
    let mse = mse_masked(got.data.data(), gt.data.data(), mask.as_deref())?;
    let ssim_v = match kind {
        ConditionKind::Edge | ConditionKind::Sketch => Some(ssim(
            got.data.data(),
            gt.data.data(),
            rendered.height,
            rendered.width,
        )),
        _ => None,
    };
    Ok(CondComparison {
        mse,
        psnr: psnr_of_mse(mse),
        ssim: ssim_v,
    })
}

/// R-MSE: normalized rendered depth against the depth condition, on the
/// valid mask. Invariant under positive affine rescaling of the rendered
/// depth because of the min-max normalization.
pub fn r_mse(rendered: &RenderOutput, gt: &ConditionMap) -> Result<f64, MetricError> {
    let normed = crate::conditions::f_norm(&rendered.depth, &rendered.mask())?;
    let mask: Vec<f32> = match (&normed.mask, &gt.mask) {
        (Some(x), Some(y)) => x.iter().zip(y).map(|(a, b)| a * b).collect(),
        (Some(x), None) | (None, Some(x)) => x.clone(),
        (None, None) => vec![1.0; rendered.height * rendered.width],
    };
    mse_masked(normed.data.data(), gt.data.data(), Some(&mask))
}

/// DN-CON: depth-derived normals of the render against the normal
/// condition, on the valid mask.
pub fn dn_con(rendered: &RenderOutput, gt: &ConditionMap) -> Result<f64, MetricError> {
    let mask_r = rendered.mask();
    let z = crate::conditions::z_from_ray_depth(&rendered.depth, rendered.focal_px)?;
    let derived = crate::conditions::f_d2n(&z, rendered.focal_px, Some(&mask_r))?;
    let mask: Vec<f32> = match &gt.mask {
        Some(y) => mask_r.iter().zip(y).map(|(a, b)| a * b).collect(),
        None => mask_r,
    };
    mse_masked(derived.data.data(), gt.data.data(), Some(&mask))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSetting {
    AllViews,
    Front4,
}

impl std::str::FromStr for ViewSetting {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(ViewSetting::AllViews),
            "front4" => Ok(ViewSetting::Front4),
            other => Err(format!("unknown view setting '{other}' (expected all|front4)")),
        }
    }
}

/// Evaluation views for one scene: every non-reference view, or the four
/// whose forward axes are angularly closest to the reference view's.
pub fn eval_view_indices(
    scene: &MultiViewSample,
    setting: ViewSetting,
) -> Vec<usize> {
    let ref_fwd = scene.views[scene.reference_index].pose.forward();
    let mut others: Vec<(usize, f32)> = scene
        .views
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != scene.reference_index)
        .map(|(i, v)| {
            let d = v_dot(v.pose.forward(), ref_fwd).clamp(-1.0, 1.0);
            (i, d.acos())
        })
        .collect();
    match setting {
        ViewSetting::AllViews => others.iter().map(|(i, _)| *i).collect(),
        ViewSetting::Front4 => {
            others.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            others.iter().take(4).map(|(i, _)| *i).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
            n: values.len(),
        }
    }
}

/// Per-kind metric table. Only metrics applicable to the kind are
/// populated; `clip_i`/`clip_t` come from the toy stand-in encoders.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct KindMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_mse: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dn_con: Option<Stat>,
    pub clip_i: Stat,
    pub clip_t: Stat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    /// Marks the embedding scores as toy stand-ins.
    pub embedding_note: String,
    pub view_setting: ViewSetting,
    pub n_scenes: usize,
    pub kinds: BTreeMap<String, KindMetrics>,
    /// Per-scene problems (missing files etc.); evaluation continues past
    /// them.
    pub errors: Vec<String>,
}

pub struct EvalConfig {
    pub kinds: Vec<ConditionKind>,
    pub setting: ViewSetting,
    pub render: RenderConfig,
    /// Rendering resolution for evaluation (defaults to the dataset
    /// resolution).
    pub res: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            kinds: ConditionKind::ALL.to_vec(),
            setting: ViewSetting::Front4,
            render: RenderConfig::default(),
            res: None,
        }
    }
}

/// Evaluate a trained model over the held-out split.
pub fn evaluate(
    dataset: &Dataset,
    model: &ParamStore,
    gen_cfg: &GeneratorConfig,
    semantic: &ParamStore,
    cfg: &EvalConfig,
) -> Result<MetricReport, MetricError> {
    let ids = dataset.indices(Split::HeldOut);
    if ids.is_empty() {
        return Err(MetricError::EmptySplit);
    }
    let enc = Encoders::frozen(semantic);
    let gen = Generator::frozen(gen_cfg, model);
    let dec = PointDecoder::from_store(model);
    let mut errors = Vec::new();

    // values[kind][metric][scene] accumulated as per-scene means.
    let mut acc: BTreeMap<ConditionKind, BTreeMap<&'static str, Vec<f64>>> = BTreeMap::new();

    let mut n_scenes = 0usize;
    for &i in &ids {
        let scene = match dataset.load_scene(i) {
            Ok(s) => s,
            Err(e) => {
                errors.push(format!("scene {i}: {e}"));
                continue;
            }
        };
        n_scenes += 1;
        let prompt = match TextPrompt::new(&scene.caption) {
            Ok(p) => p,
            Err(e) => {
                errors.push(format!("scene {i}: {e}"));
                continue;
            }
        };
        let text_emb = enc.encode_text(&prompt)?;
        let res = cfg.res.unwrap_or(dataset.manifest.config.res);
        let views = eval_view_indices(&scene, cfg.setting);

        for kind in &cfg.kinds {
            let result = (|| -> Result<BTreeMap<&'static str, f64>, MetricError> {
                let cond = scene.condition(*kind);
                let cond_input = ConditionMap {
                    kind: *kind,
                    data: cond.data.detach(),
                    mask: cond.mask.clone(),
                };
                let tp = gen.generate(&cond_input, &text_emb, &scene.reference().pose)?;
                let field = TriplaneField {
                    triplane: &tp,
                    decoder: &dec,
                };
                let mut per_view: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
                for &v in &views {
                    let view = &scene.views[v];
                    let pose = resize_pose(&view.pose, res);
                    let out = render(&field, &pose, &cfg.render, None)?;
                    let gt_rgb = Tensor::from_vec(view.rgb.clone(), &[res, res, 3])?;
                    let gt_depth = Tensor::from_vec(view.depth.clone(), &[res, res])?;
                    let gt_cond = extract_from_parts(
                        *kind,
                        &gt_rgb,
                        &gt_depth,
                        &view.mask,
                        pose.focal_px(),
                    )?;
                    match kind {
                        ConditionKind::Edge | ConditionKind::Sketch => {
                            let c = compare_condition(*kind, &out, &gt_cond)?;
                            per_view.entry("mse").or_default().push(c.mse);
                            per_view.entry("psnr").or_default().push(c.psnr);
                            per_view.entry("ssim").or_default().push(c.ssim.unwrap());
                        }
                        ConditionKind::Depth => {
                            per_view.entry("r_mse").or_default().push(r_mse(&out, &gt_cond)?);
                        }
                        ConditionKind::Normal => {
                            per_view
                                .entry("dn_con")
                                .or_default()
                                .push(dn_con(&out, &gt_cond)?);
                        }
                    }
                    let img_emb = enc.encode_image(&out.image)?;
                    let gt_emb = enc.encode_image(&gt_rgb)?;
                    per_view
                        .entry("clip_i")
                        .or_default()
                        .push(cosine(&img_emb, &gt_emb)?.item()? as f64);
                    per_view
                        .entry("clip_t")
                        .or_default()
                        .push(cosine(&img_emb, &text_emb)?.item()? as f64);
                }
                Ok(per_view
                    .into_iter()
                    .map(|(k, vs)| (k, vs.iter().sum::<f64>() / vs.len() as f64))
                    .collect())
            })();
            match result {
                Ok(per_scene) => {
                    let slot = acc.entry(*kind).or_default();
                    for (m, v) in per_scene {
                        slot.entry(m).or_default().push(v);
                    }
                }
                Err(e) => errors.push(format!("scene {i} kind {kind}: {e}")),
            }
        }
    }

    let mut kinds = BTreeMap::new();
    for (kind, metrics) in acc {
        let stat = |name: &str| metrics.get(name).map(|v| Stat::from_values(v));
        kinds.insert(
            kind.name().to_string(),
            KindMetrics {
                psnr: stat("psnr"),
                ssim: stat("ssim"),
                mse: stat("mse"),
                r_mse: stat("r_mse"),
                dn_con: stat("dn_con"),
                clip_i: stat("clip_i").unwrap_or_default(),
                clip_t: stat("clip_t").unwrap_or_default(),
            },
        );
    }
    Ok(MetricReport {
        embedding_note:
            "clip_i/clip_t use the repository's toy contrastive encoders (stand-ins), not a pretrained model"
                .to_string(),
        view_setting: cfg.setting,
        n_scenes,
        kinds,
        errors,
    })
}

impl MetricReport {
    /// JSON (machine), CSV (flat), and an aligned text table (human).
    pub fn write_files(&self, json_path: &Path) -> Result<(), MetricError> {
        let io = |p: &Path, e: std::io::Error| MetricError::Io {
            path: p.display().to_string(),
            source: e,
        };
        if let Some(dir) = json_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| io(json_path, e))?;
        }
        std::fs::write(
            json_path,
            serde_json::to_string_pretty(self).expect("serializable"),
        )
        .map_err(|e| io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| io(&csv_path, e))?;
        let txt_path = json_path.with_extension("txt");
        std::fs::write(&txt_path, self.to_table()).map_err(|e| io(&txt_path, e))?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,metric,mean,std,n\n");
        for (kind, m) in &self.kinds {
            let mut push = |name: &str, s: &Option<Stat>| {
                if let Some(s) = s {
                    out.push_str(&format!("{kind},{name},{},{},{}\n", s.mean, s.std, s.n));
                }
            };
            push("psnr", &m.psnr);
            push("ssim", &m.ssim);
            push("mse", &m.mse);
            push("r_mse", &m.r_mse);
            push("dn_con", &m.dn_con);
            push("clip_i", &Some(m.clip_i));
            push("clip_t", &Some(m.clip_t));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>9} {:>9}\n",
            "kind", "psnr", "ssim", "mse", "r_mse", "dn_con", "clip_i*", "clip_t*"
        );
        let fmt = |s: &Option<Stat>| match s {
            Some(v) => format!("{:.4}", v.mean),
            None => "-".to_string(),
        };
        for (kind, m) in &self.kinds {
            out.push_str(&format!(
                "{:<8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>9.4} {:>9.4}\n",
                kind,
                fmt(&m.psnr),
                fmt(&m.ssim),
                fmt(&m.mse),
                fmt(&m.r_mse),
                fmt(&m.dn_con),
                m.clip_i.mean,
                m.clip_t.mean
            ));
        }
        out.push_str("* toy-encoder stand-in scores\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_exact_values() {
        assert_eq!(psnr_of_mse(1e-2), 20.0);
        assert_eq!(psnr_of_mse(1e-4), 40.0);
        assert!(psnr_of_mse(0.0).is_infinite());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a: Vec<f32> = (0..12 * 12).map(|i| (i as f32 * 0.17).fract()).collect();
        let b: Vec<f32> = (0..12 * 12).map(|i| (i as f32 * 0.31).fract()).collect();
        assert!((ssim(&a, &a, 12, 12) - 1.0).abs() < 1e-9);
        let ab = ssim(&a, &b, 12, 12);
        let ba = ssim(&b, &a, 12, 12);
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab < 1.0);
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let a: Vec<f32> = (0..30).map(|i| (i as f32 * 0.7).sin()).collect();
        let b: Vec<f32> = (0..30).map(|i| (i as f32 * 0.3).cos()).collect();
        let got = mse_masked(&a, &b, None).unwrap();
        let mut want = 0.0f64;
        for i in 0..30 {
            want += (a[i] as f64 - b[i] as f64).powi(2);
        }
        want /= 30.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn r_mse_affine_invariant() {
        let (h, w) = (8usize, 8usize);
        let depth: Vec<f32> = (0..64).map(|i| 1.5 + 0.05 * (i % 9) as f32).collect();
        let mk = |d: Vec<f32>| RenderOutput {
            image: Tensor::zeros(&[h, w, 3]),
            depth: Tensor::from_vec(d, &[h, w]).unwrap(),
            alpha: Tensor::ones(&[h, w]),
            height: h,
            width: w,
            focal_px: 16.0,
        };
        let gt = crate::conditions::f_norm(
            &Tensor::from_vec(depth.clone(), &[h, w]).unwrap(),
            &vec![1.0; 64],
        )
        .unwrap();
        let base = r_mse(&mk(depth.clone()), &gt).unwrap();
        let scaled = r_mse(
            &mk(depth.iter().map(|v| 3.25 * v + 0.7).collect()),
            &gt,
        )
        .unwrap();
        assert!((base - scaled).abs() < 1e-7, "{base} vs {scaled}");
        assert!(base < 1e-10);
    }

    #[test]
    fn dn_con_zero_on_matching_normals() {
        let (h, w) = (8usize, 8usize);
        let out = RenderOutput {
            image: Tensor::zeros(&[h, w, 3]),
            depth: Tensor::full(2.0, &[h, w]),
            alpha: Tensor::ones(&[h, w]),
            height: h,
            width: w,
            focal_px: 16.0,
        };
        let z = crate::conditions::z_from_ray_depth(&out.depth, out.focal_px).unwrap();
        let derived = crate::conditions::f_d2n(&z, out.focal_px, None).unwrap();
        let gt = ConditionMap {
            kind: ConditionKind::Normal,
            data: derived.data.detach(),
            mask: None,
        };
        assert!(dn_con(&out, &gt).unwrap() < 1e-12);
    }
}
