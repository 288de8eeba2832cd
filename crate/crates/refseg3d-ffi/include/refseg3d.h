/* C API for refseg3d: checkpoint loading and referring-expression segmentation. */

#ifndef REFSEG3D_H
#define REFSEG3D_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Inference modes accepted by [`refseg_infer`].
 */
#define REFSEG_MODE_RES 0

#define REFSEG_MODE_GRES 1

/**
 * Result of every FFI call.
 */
enum RefsegStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  REFSEG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  REFSEG_STATUS_NULL_ARGUMENT = 1,
  /**
   * Inputs were structurally invalid (shapes, labels, mode).
   */
  REFSEG_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The checkpoint could not be read.
   */
  REFSEG_STATUS_IO = 3,
  /**
   * The model rejected the inputs or failed during the forward pass.
   */
  REFSEG_STATUS_MODEL = 4,
  /**
   * A panic was caught at the boundary; state may be stale but memory is safe.
   */
  REFSEG_STATUS_INTERNAL = 5,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum RefsegStatus RefsegStatus;
#else
typedef int32_t RefsegStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque handle to a loaded model (config plus parameters).
 */
typedef struct RefsegModel RefsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread; do not free it.
 * Returns an empty string when nothing has failed yet.
 */
const char *refseg_last_error(void);

/**
 * Library version as a static string; do not free.
 */
const char *refseg_version(void);

/**
 * Loads a checkpoint directory (`index.json` plus tensor blobs) and hands
 * back an owned model handle through `out_model`.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out_model` to writable
 * pointer storage; both only need to stay valid for the duration of the call.
 */
RefsegStatus refseg_model_load(const char *path, struct RefsegModel **out_model);

/**
 * Releases a handle from [`refseg_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer returned by [`refseg_model_load`] that has not
 * been freed yet.
 */
void refseg_model_free(struct RefsegModel *model);

/**
 * Model configuration as a JSON document. The returned string is owned by
 * the caller; release it with [`refseg_string_free`]. Returns null on error.
 *
 * # Safety
 * `model` must be a live handle from [`refseg_model_load`].
 */
char *refseg_model_config_json(const struct RefsegModel *model);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from a refseg function documented to transfer string
 * ownership, and must not have been freed already.
 */
void refseg_string_free(char *s);

/**
 * Number of trainable parameter values in the model, for sanity checks.
 *
 * # Safety
 * `model` must be a live handle; `out_count` must be writable.
 */
RefsegStatus refseg_model_num_params(const struct RefsegModel *model, size_t *out_count);

/**
 * Segments the points referred to by a text-feature matrix.
 *
 * Layout (all row-major f64):
 * - `points`: `n_points x 3` coordinates
 * - `features`: `n_points x feature_dim` per-point features; `feature_dim`
 *   must match the checkpoint's 3D feature width
 * - `superpoint_ids`: `n_points` labels forming a dense `[0, n_superpoints)`
 *   cover
 * - `text`: `n_tokens x text_dim` text embeddings
 * - `mode`: `REFSEG_MODE_RES` (single best query) or `REFSEG_MODE_GRES`
 *   (union of confident queries, possibly empty)
 * - `out_mask`: `n_points` bytes, written as 0/1 per point
 *
 * # Safety
 * Every pointer must reference a buffer of the documented length, valid for
 * the duration of the call; buffers must not alias `out_mask`.
 */
RefsegStatus refseg_infer(const struct RefsegModel *model,
                          const double *points,
                          size_t n_points,
                          const double *features,
                          size_t feature_dim,
                          const size_t *superpoint_ids,
                          const double *text,
                          size_t n_tokens,
                          size_t text_dim,
                          int32_t mode,
                          uint8_t *out_mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REFSEG3D_H */
