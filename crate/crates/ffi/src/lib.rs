//! C ABI over the cycgen pipeline.
//!
//! Handles are opaque; every call returns a [`CycStatus`] and leaves a
//! human-readable message for [`cyc_last_error_message`] on failure.
//! Heavyweight operations (dataset generation, training, evaluation) are
//! file-driven: paths in, artifacts out, matching the CLI. Lightweight
//! ones (rendering, condition extraction) move float buffers across the
//! boundary; the caller owns every buffer it passes.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;

use libc::{c_char, c_float, size_t};

use cycgen::conditions::{extract_from_parts, ConditionKind, ConditionMap};
use cycgen::config::RunConfig;
use cycgen::dataset::{build_dataset, Dataset};
use cycgen::embed::{Encoders, TextPrompt};
use cycgen::generator::{Generator, GeneratorConfig};
use cycgen::metrics::{evaluate, ViewSetting};
use cycgen::params::ParamStore;
use cycgen::render::{render, RenderConfig};
use cycgen::tensor::Tensor;
use cycgen::trainer::train;
use cycgen::triplane::{PointDecoder, TriplaneField};

/// Status code of every FFI call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum CycStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Runtime = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").expect("empty"));
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul filtered");
    });
}

fn fail(status: CycStatus, msg: impl std::fmt::Display) -> CycStatus {
    set_error(&msg.to_string());
    status
}

/// Message describing the most recent failure on this thread. Valid until
/// the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn cyc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn guard(body: impl FnOnce() -> CycStatus) -> CycStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(CycStatus::Runtime, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or NULL.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, CycStatus> {
    if ptr.is_null() {
        set_error("unexpected NULL string argument");
        return Err(CycStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        CycStatus::InvalidArgument
    })
}

/// Loaded model checkpoint plus frozen semantic encoders. Opaque.
pub struct CycModel {
    model: ParamStore,
    semantic: ParamStore,
    config: RunConfig,
    gen_cfg: GeneratorConfig,
}

/// Load a trained checkpoint directory (as written by training, including
/// its `effective_config.json`) together with the frozen semantic
/// checkpoint. On success `*out` owns the handle; release it with
/// [`cyc_model_free`].
///
/// # Safety
/// `ckpt_dir` and `semantic_dir` are NUL-terminated paths; `out` points to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cyc_model_load(
    ckpt_dir: *const c_char,
    semantic_dir: *const c_char,
    out: *mut *mut CycModel,
) -> CycStatus {
    guard(|| {
        if out.is_null() {
            return fail(CycStatus::NullPointer, "out handle is NULL");
        }
        let ckpt = match read_str(ckpt_dir) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let semantic = match read_str(semantic_dir) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let cfg_path = Path::new(ckpt).join("effective_config.json");
        let config = match RunConfig::from_file(&cfg_path) {
            Ok(c) => c,
            Err(e) => return fail(CycStatus::Io, e),
        };
        let (model, _) = match ParamStore::load(Path::new(ckpt)) {
            Ok(m) => m,
            Err(e) => return fail(CycStatus::Io, e),
        };
        let (semantic, _) = match ParamStore::load(Path::new(semantic)) {
            Ok(m) => m,
            Err(e) => return fail(CycStatus::Io, e),
        };
        let gen_cfg = config.generator_config();
        let handle = Box::new(CycModel {
            model,
            semantic,
            config,
            gen_cfg,
        });
        *out = Box::into_raw(handle);
        CycStatus::Ok
    })
}

/// # Safety
/// `model` must have come from [`cyc_model_load`] and not yet been freed.
#[no_mangle]
pub unsafe extern "C" fn cyc_model_free(model: *mut CycModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable parameters in the loaded model.
///
/// # Safety
/// `model` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cyc_model_param_count(
    model: *const CycModel,
    out: *mut u64,
) -> CycStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(CycStatus::NullPointer, "NULL argument");
        }
        *out = (*model).model.n_params() as u64;
        CycStatus::Ok
    })
}

/// Square resolution of images produced by [`cyc_render_view`] for this
/// model (the dataset resolution from its configuration).
///
/// # Safety
/// `model` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cyc_render_resolution(
    model: *const CycModel,
    out: *mut size_t,
) -> CycStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(CycStatus::NullPointer, "NULL argument");
        }
        *out = (*model).config.dataset.res;
        CycStatus::Ok
    })
}

/// Generate a triplane from a condition map and prompt, render the grid
/// view `view_index`, and write RGB into `out_image` (res·res·3 floats,
/// row-major, in [0,1]; res from [`cyc_render_resolution`]).
///
/// `cond` holds `cond_h·cond_w` floats for scalar kinds or
/// `cond_h·cond_w·3` for normals, and its resolution must match the
/// model's condition input.
///
/// # Safety
/// `model` is a live handle; `cond`, `kind`, `prompt`, `out_image` are
/// valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn cyc_render_view(
    model: *const CycModel,
    kind: *const c_char,
    cond: *const c_float,
    cond_h: size_t,
    cond_w: size_t,
    prompt: *const c_char,
    view_index: size_t,
    out_image: *mut c_float,
) -> CycStatus {
    guard(|| {
        if model.is_null() || cond.is_null() || out_image.is_null() {
            return fail(CycStatus::NullPointer, "NULL argument");
        }
        let m = &*model;
        let kind = match read_str(kind).and_then(|s| {
            ConditionKind::from_str(s).map_err(|e| {
                set_error(&e);
                CycStatus::InvalidArgument
            })
        }) {
            Ok(k) => k,
            Err(st) => return st,
        };
        let prompt = match read_str(prompt) {
            Ok(p) => p,
            Err(st) => return st,
        };
        if cond_h != m.gen_cfg.cond_res || cond_w != m.gen_cfg.cond_res {
            return fail(
                CycStatus::InvalidArgument,
                format!(
                    "condition must be {0}x{0} for this model, got {1}x{2}",
                    m.gen_cfg.cond_res, cond_h, cond_w
                ),
            );
        }
        let n = cond_h * cond_w * kind.channels();
        let data = std::slice::from_raw_parts(cond, n).to_vec();
        let shape: Vec<usize> = if kind.channels() == 1 {
            vec![cond_h, cond_w]
        } else {
            vec![cond_h, cond_w, 3]
        };
        let status = (|| -> Result<Vec<f32>, String> {
            let cond_map = ConditionMap {
                kind,
                data: Tensor::from_vec(data, &shape).map_err(|e| e.to_string())?,
                mask: None,
            };
            let grid = cycgen::dataset::DatasetConfig {
                views: m.config.dataset.views,
                res: m.config.dataset.res,
                ..cycgen::dataset::DatasetConfig::default()
            }
            .grid();
            if view_index >= grid.poses.len() {
                return Err(format!(
                    "view_index {} out of range ({} grid views)",
                    view_index,
                    grid.poses.len()
                ));
            }
            let prompt = TextPrompt::new(prompt).map_err(|e| e.to_string())?;
            let enc = Encoders::frozen(&m.semantic);
            let text = enc.encode_text(&prompt).map_err(|e| e.to_string())?;
            let gen = Generator::frozen(&m.gen_cfg, &m.model);
            let tp = gen
                .generate(&cond_map, &text, &grid.poses[m.config.dataset.views[0]])
                .map_err(|e| e.to_string())?;
            let dec = PointDecoder::from_store(&m.model);
            let field = TriplaneField {
                triplane: &tp,
                decoder: &dec,
            };
            let out = render(
                &field,
                &grid.poses[view_index],
                &RenderConfig {
                    n_samples: m.config.eval.n_samples,
                    ..RenderConfig::default()
                },
                None,
            )
            .map_err(|e| e.to_string())?;
            Ok(out.image.data().to_vec())
        })();
        match status {
            Ok(img) => {
                std::ptr::copy_nonoverlapping(img.as_ptr(), out_image, img.len());
                CycStatus::Ok
            }
            Err(e) => fail(CycStatus::Runtime, e),
        }
    })
}

/// Extract a condition map. Edge/sketch read `input` as an h·w·3 RGB
/// image; depth/normal read it as an h·w depth map (all pixels valid).
/// `out` receives h·w floats for scalar kinds or h·w·3 for normals.
/// `focal_px` is used by the normal kind; pass 0 for the default camera.
///
/// # Safety
/// `kind` is a NUL-terminated string; `input` and `out` are valid for the
/// documented lengths.
#[no_mangle]
pub unsafe extern "C" fn cyc_extract_condition(
    kind: *const c_char,
    input: *const c_float,
    h: size_t,
    w: size_t,
    focal_px: c_float,
    out: *mut c_float,
) -> CycStatus {
    guard(|| {
        if input.is_null() || out.is_null() {
            return fail(CycStatus::NullPointer, "NULL argument");
        }
        let kind = match read_str(kind).and_then(|s| {
            ConditionKind::from_str(s).map_err(|e| {
                set_error(&e);
                CycStatus::InvalidArgument
            })
        }) {
            Ok(k) => k,
            Err(st) => return st,
        };
        if h == 0 || w == 0 {
            return fail(CycStatus::InvalidArgument, "empty input");
        }
        let focal = if focal_px > 0.0 {
            focal_px
        } else {
            (h as f32 / 2.0) / (50.0f32.to_radians() / 2.0).tan()
        };
        let result = (|| -> Result<Vec<f32>, String> {
            let (image, depth, mask) = match kind {
                ConditionKind::Edge | ConditionKind::Sketch => {
                    let rgb = std::slice::from_raw_parts(input, h * w * 3).to_vec();
                    (
                        Tensor::from_vec(rgb, &[h, w, 3]).map_err(|e| e.to_string())?,
                        Tensor::zeros(&[h, w]),
                        vec![1.0f32; h * w],
                    )
                }
                ConditionKind::Depth | ConditionKind::Normal => {
                    let d = std::slice::from_raw_parts(input, h * w).to_vec();
                    (
                        Tensor::zeros(&[h, w, 3]),
                        Tensor::from_vec(d, &[h, w]).map_err(|e| e.to_string())?,
                        vec![1.0f32; h * w],
                    )
                }
            };
            let cond = extract_from_parts(kind, &image, &depth, &mask, focal)
                .map_err(|e| e.to_string())?;
            Ok(cond.data.data().to_vec())
        })();
        match result {
            Ok(data) => {
                std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
                CycStatus::Ok
            }
            Err(e) => fail(CycStatus::Runtime, e),
        }
    })
}

/// Generate the procedural dataset into `out_dir` (like `cycgen
/// gen-data`).
///
/// # Safety
/// `out_dir` is a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn cyc_generate_dataset(
    out_dir: *const c_char,
    n_scenes: size_t,
    res: size_t,
    seed: u64,
) -> CycStatus {
    guard(|| {
        let out = match read_str(out_dir) {
            Ok(s) => s,
            Err(st) => return st,
        };
        if n_scenes == 0 || res == 0 {
            return fail(CycStatus::InvalidArgument, "n_scenes and res must be >= 1");
        }
        let cfg = cycgen::dataset::DatasetConfig {
            n_scenes,
            res,
            seed,
            ..cycgen::dataset::DatasetConfig::default()
        };
        match build_dataset(&cfg, Path::new(out)) {
            Ok(_) => CycStatus::Ok,
            Err(e) => fail(CycStatus::Io, e),
        }
    })
}

/// Run cycle training (like `cycgen train`): dataset and semantic
/// checkpoint in, model checkpoint directory out.
///
/// # Safety
/// All paths and `kind` are NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cyc_train_run(
    data_dir: *const c_char,
    semantic_dir: *const c_char,
    out_dir: *const c_char,
    kind: *const c_char,
    steps: size_t,
    seed: u64,
) -> CycStatus {
    guard(|| {
        let (data, semantic, out, kind_s) = match (
            read_str(data_dir),
            read_str(semantic_dir),
            read_str(out_dir),
            read_str(kind),
        ) {
            (Ok(a), Ok(b), Ok(c), Ok(d)) => (a, b, c, d),
            (Err(st), _, _, _) | (_, Err(st), _, _) | (_, _, Err(st), _) | (_, _, _, Err(st)) => {
                return st
            }
        };
        let kind = match ConditionKind::from_str(kind_s) {
            Ok(k) => k,
            Err(e) => return fail(CycStatus::InvalidArgument, e),
        };
        if steps == 0 {
            return fail(CycStatus::InvalidArgument, "steps must be >= 1");
        }
        let dataset = match Dataset::open(Path::new(data)) {
            Ok(d) => d,
            Err(e) => return fail(CycStatus::Io, e),
        };
        let (sem, _) = match ParamStore::load(Path::new(semantic)) {
            Ok(m) => m,
            Err(e) => return fail(CycStatus::Io, e),
        };
        let mut cfg = RunConfig::default();
        let r = dataset.manifest.config.res;
        cfg.dataset.res = r;
        cfg.model.cond_res = r;
        cfg.model.h_p = r / 4;
        cfg.model.w_p = r / 4;
        cfg.train.kind = kind;
        cfg.train.steps = steps;
        cfg.train.seed = Some(seed);
        if let Err(e) = cfg.validate() {
            return fail(CycStatus::InvalidArgument, e);
        }
        match train(&dataset, &cfg.train_config(), &sem, Path::new(out)) {
            Ok(_) => {
                if let Err(e) =
                    std::fs::write(Path::new(out).join("effective_config.json"), cfg.echo())
                {
                    return fail(CycStatus::Io, e);
                }
                CycStatus::Ok
            }
            Err(e) => fail(CycStatus::Runtime, e),
        }
    })
}

/// Evaluate a checkpoint on the held-out split and write the report files
/// (like `cycgen eval`). `views` is "all" or "front4".
///
/// # Safety
/// All paths and `views` are NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cyc_eval_run(
    data_dir: *const c_char,
    ckpt_dir: *const c_char,
    semantic_dir: *const c_char,
    views: *const c_char,
    report_path: *const c_char,
) -> CycStatus {
    guard(|| {
        let (data, ckpt, semantic, views_s, report) = match (
            read_str(data_dir),
            read_str(ckpt_dir),
            read_str(semantic_dir),
            read_str(views),
            read_str(report_path),
        ) {
            (Ok(a), Ok(b), Ok(c), Ok(d), Ok(e)) => (a, b, c, d, e),
            (Err(st), _, _, _, _)
            | (_, Err(st), _, _, _)
            | (_, _, Err(st), _, _)
            | (_, _, _, Err(st), _)
            | (_, _, _, _, Err(st)) => return st,
        };
        let setting = match ViewSetting::from_str(views_s) {
            Ok(v) => v,
            Err(e) => return fail(CycStatus::InvalidArgument, e),
        };
        let dataset = match Dataset::open(Path::new(data)) {
            Ok(d) => d,
            Err(e) => return fail(CycStatus::Io, e),
        };
        let (model, _) = match ParamStore::load(Path::new(ckpt)) {
            Ok(m) => m,
            Err(e) => return fail(CycStatus::Io, e),
        };
        let (sem, _) = match ParamStore::load(Path::new(semantic)) {
            Ok(m) => m,
            Err(e) => return fail(CycStatus::Io, e),
        };
        let mut cfg = match RunConfig::from_file(&Path::new(ckpt).join("effective_config.json")) {
            Ok(c) => c,
            Err(_) => RunConfig::default(),
        };
        let r = dataset.manifest.config.res;
        cfg.dataset.res = r;
        cfg.model.cond_res = r;
        cfg.model.h_p = r / 4;
        cfg.model.w_p = r / 4;
        cfg.eval.view_setting = setting;
        let report_data = match evaluate(
            &dataset,
            &model,
            &cfg.generator_config(),
            &sem,
            &cfg.eval_config(),
        ) {
            Ok(r) => r,
            Err(e) => return fail(CycStatus::Runtime, e),
        };
        match report_data.write_files(Path::new(report)) {
            Ok(()) => CycStatus::Ok,
            Err(e) => fail(CycStatus::Io, e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    #[test]
    fn full_roundtrip_through_the_c_abi() {
        let dir = tempfile::tempdir().unwrap();
        let data = CString::new(dir.path().join("data").to_str().unwrap()).unwrap();
        unsafe {
            // Dataset.
            let st = cyc_generate_dataset(data.as_ptr(), 8, 32, 5);
            assert!(st == CycStatus::Ok, "{:?}", error_text());

            // Semantic encoders (tiny pretraining via the library, then a
            // checkpoint the FFI can load).
            let sem_store = cycgen::embed::init_params(3);
            let sem_dir = dir.path().join("sem");
            sem_store.save(&sem_dir, "semantic", 0).unwrap();

            // Short training run through the ABI.
            let sem = CString::new(sem_dir.to_str().unwrap()).unwrap();
            let out = CString::new(dir.path().join("ckpt").to_str().unwrap()).unwrap();
            let kind = CString::new("edge").unwrap();
            // Default RunConfig wants cond_res == dataset res; train_run
            // adapts, but keep the run tiny.
            let st = cyc_train_run(data.as_ptr(), sem.as_ptr(), out.as_ptr(), kind.as_ptr(), 2, 9);
            assert!(st == CycStatus::Ok, "{:?}", error_text());

            // Load and render through the handle.
            let mut handle: *mut CycModel = std::ptr::null_mut();
            let st = cyc_model_load(out.as_ptr(), sem.as_ptr(), &mut handle);
            assert!(st == CycStatus::Ok, "{:?}", error_text());
            let mut res: size_t = 0;
            assert!(cyc_render_resolution(handle, &mut res) == CycStatus::Ok);
            assert_eq!(res, 32);
            let mut count: u64 = 0;
            assert!(cyc_model_param_count(handle, &mut count) == CycStatus::Ok);
            assert!(count > 0);

            let cond = vec![0.2f32; 32 * 32];
            let prompt = CString::new("a red sphere").unwrap();
            let mut image = vec![0.0f32; res * res * 3];
            let st = cyc_render_view(
                handle,
                kind.as_ptr(),
                cond.as_ptr(),
                32,
                32,
                prompt.as_ptr(),
                1,
                image.as_mut_ptr(),
            );
            assert!(st == CycStatus::Ok, "{:?}", error_text());
            assert!(image.iter().all(|v| v.is_finite()));

            // Extraction without a handle.
            let img: Vec<f32> = (0..16 * 16 * 3).map(|i| (i as f32 * 0.13).fract()).collect();
            let mut out_map = vec![0.0f32; 16 * 16];
            let st = cyc_extract_condition(
                kind.as_ptr(),
                img.as_ptr(),
                16,
                16,
                0.0,
                out_map.as_mut_ptr(),
            );
            assert!(st == CycStatus::Ok, "{:?}", error_text());
            assert!(out_map.iter().all(|v| (0.0..=1.0).contains(v)));

            // Error paths: NULL pointer and bad kind.
            let st = cyc_model_param_count(std::ptr::null(), &mut count);
            assert!(st == CycStatus::NullPointer);
            let bad = CString::new("wireframe").unwrap();
            let st = cyc_extract_condition(
                bad.as_ptr(),
                img.as_ptr(),
                16,
                16,
                0.0,
                out_map.as_mut_ptr(),
            );
            assert!(st == CycStatus::InvalidArgument);
            assert!(error_text().contains("wireframe"));

            cyc_model_free(handle);
        }
    }

    fn error_text() -> String {
        unsafe {
            CStr::from_ptr(cyc_last_error_message())
                .to_string_lossy()
                .into_owned()
        }
    }
}
