#ifndef CYCGEN_H
#define CYCGEN_H

/* Generated by cbindgen from cycgen-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every FFI call.
 */
typedef enum {
  CYC_STATUS_OK = 0,
  CYC_STATUS_NULL_POINTER = 1,
  CYC_STATUS_INVALID_ARGUMENT = 2,
  CYC_STATUS_IO = 3,
  CYC_STATUS_RUNTIME = 4,
} CycStatus;

/**
 * Loaded model checkpoint plus frozen semantic encoders. Opaque.
 */
typedef struct CycModel CycModel;

/**
 * Message describing the most recent failure on this thread. Valid until
 * the next failing call on the same thread; do not free.
 */
const char *cyc_last_error_message(void);

/**
 * Load a trained checkpoint directory (as written by training, including
 * its `effective_config.json`) together with the frozen semantic
 * checkpoint. On success `*out` owns the handle; release it with
 * [`cyc_model_free`].
 *
 * # Safety
 * `ckpt_dir` and `semantic_dir` are NUL-terminated paths; `out` points to
 * writable storage for one pointer.
 */
CycStatus cyc_model_load(const char *ckpt_dir, const char *semantic_dir, CycModel **out);

/**
 * # Safety
 * `model` must have come from [`cyc_model_load`] and not yet been freed.
 */
void cyc_model_free(CycModel *model);

/**
 * Number of trainable parameters in the loaded model.
 *
 * # Safety
 * `model` is a live handle; `out` points to writable storage.
 */
CycStatus cyc_model_param_count(const CycModel *model, uint64_t *out);

/**
 * Square resolution of images produced by [`cyc_render_view`] for this
 * model (the dataset resolution from its configuration).
 *
 * # Safety
 * `model` is a live handle; `out` points to writable storage.
 */
CycStatus cyc_render_resolution(const CycModel *model, size_t *out);

/**
 * Generate a triplane from a condition map and prompt, render the grid
 * view `view_index`, and write RGB into `out_image` (res·res·3 floats,
 * row-major, in [0,1]; res from [`cyc_render_resolution`]).
 *
 * `cond` holds `cond_h·cond_w` floats for scalar kinds or
 * `cond_h·cond_w·3` for normals, and its resolution must match the
 * model's condition input.
 *
 * # Safety
 * `model` is a live handle; `cond`, `kind`, `prompt`, `out_image` are
 * valid for the documented lengths.
 */
CycStatus cyc_render_view(const CycModel *model,
                          const char *kind,
                          const float *cond,
                          size_t cond_h,
                          size_t cond_w,
                          const char *prompt,
                          size_t view_index,
                          float *out_image);

/**
 * Extract a condition map. Edge/sketch read `input` as an h·w·3 RGB
 * image; depth/normal read it as an h·w depth map (all pixels valid).
 * `out` receives h·w floats for scalar kinds or h·w·3 for normals.
 * `focal_px` is used by the normal kind; pass 0 for the default camera.
 *
 * # Safety
 * `kind` is a NUL-terminated string; `input` and `out` are valid for the
 * documented lengths.
 */
CycStatus cyc_extract_condition(const char *kind,
                                const float *input,
                                size_t h,
                                size_t w,
                                float focal_px,
                                float *out);

/**
 * Generate the procedural dataset into `out_dir` (like `cycgen
 * gen-data`).
 *
 * # Safety
 * `out_dir` is a NUL-terminated path.
 */
CycStatus cyc_generate_dataset(const char *out_dir, size_t n_scenes, size_t res, uint64_t seed);

/**
 * Run cycle training (like `cycgen train`): dataset and semantic
 * checkpoint in, model checkpoint directory out.
 *
 * # Safety
 * All paths and `kind` are NUL-terminated strings.
 */
CycStatus cyc_train_run(const char *data_dir,
                        const char *semantic_dir,
                        const char *out_dir,
                        const char *kind,
                        size_t steps,
                        uint64_t seed);

/**
 * Evaluate a checkpoint on the held-out split and write the report files
 * (like `cycgen eval`). `views` is "all" or "front4".
 *
 * # Safety
 * All paths and `views` are NUL-terminated strings.
 */
CycStatus cyc_eval_run(const char *data_dir,
                       const char *ckpt_dir,
                       const char *semantic_dir,
                       const char *views,
                       const char *report_path);

#endif /* CYCGEN_H */
