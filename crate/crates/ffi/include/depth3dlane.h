#ifndef DEPTH3DLANE_H
#define DEPTH3DLANE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes.
 */
typedef enum D3lStatus {
  D3L_STATUS_OK = 0,
  D3L_STATUS_NULL_ARGUMENT = 1,
  D3L_STATUS_INVALID_UTF8 = 2,
  D3L_STATUS_CONFIG = 3,
  D3L_STATUS_PARSE = 4,
  D3L_STATUS_SHAPE = 5,
  D3L_STATUS_IO = 6,
  D3L_STATUS_CHECKPOINT = 7,
  D3L_STATUS_RIG = 8,
  D3L_STATUS_OTHER = 9,
  D3L_STATUS_PANIC = 10,
} D3lStatus;

/**
 * Opaque model handle.
 */
typedef struct D3lModel D3lModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *d3l_last_error(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` is null or came from this library and was not freed before.
 */
void d3l_string_free(char *s);

/**
 * Load a checkpoint. `config_toml` (nullable) supplies CRF and evaluation
 * settings; defaults otherwise.
 *
 * # Safety
 * String arguments are null or NUL-terminated; `out` is writable.
 */
enum D3lStatus d3l_model_load(const char *checkpoint_path,
                              const char *config_toml,
                              struct D3lModel **out);

/**
 * # Safety
 * `model` is null or came from [`d3l_model_load`] and was not freed before.
 */
void d3l_model_free(struct D3lModel *model);

/**
 * Network input size of `model`.
 *
 * # Safety
 * `model` is a live handle; `height` and `width` are writable.
 */
enum D3lStatus d3l_model_input_size(const struct D3lModel *model, size_t *height, size_t *width);

/**
 * Detect lanes in an interleaved 8-bit RGB image (`height * width * 3`
 * bytes, row-major). `rig_toml` (nullable) describes the camera; the model's
 * virtual camera is assumed otherwise. Writes a lane-set JSON document.
 *
 * # Safety
 * `rgb` points to `height * width * 3` readable bytes; strings are null or
 * NUL-terminated; `out_json` is writable.
 */
enum D3lStatus d3l_infer(const struct D3lModel *model,
                         const uint8_t *rgb,
                         size_t height,
                         size_t width,
                         const char *rig_toml,
                         bool use_crf,
                         char **out_json);

/**
 * Score one frame of predicted lanes against ground truth (both lane-set
 * JSON) with the default protocol. Writes the metrics as JSON.
 *
 * # Safety
 * Strings are null or NUL-terminated; `out_json` is writable.
 */
enum D3lStatus d3l_evaluate(const char *preds_json, const char *gts_json, char **out_json);

/**
 * Ground-plane homography taking `src` pixels to `dst` pixels, row-major
 * into `out[9]`, scaled so `out[8] == 1`.
 *
 * # Safety
 * Strings are null or NUL-terminated; `out` has room for 9 doubles.
 */
enum D3lStatus d3l_ground_homography(const char *src_rig_toml,
                                     const char *dst_rig_toml,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTH3DLANE_H */
