/* C interface to the gesr ranking library. Generated by cbindgen; do not edit. */

#ifndef GESR_H
#define GESR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code for every fallible entry point.
 */
enum GesrStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  GESR_STATUS_OK = 0,
  GESR_STATUS_NULL_ARGUMENT = 1,
  GESR_STATUS_INVALID_UTF8 = 2,
  GESR_STATUS_PARSE_ERROR = 3,
  GESR_STATUS_INVALID_INPUT = 4,
  GESR_STATUS_INVALID_CONFIG = 5,
  GESR_STATUS_CACHE_MISS = 6,
  GESR_STATUS_STALE_CACHE = 7,
  GESR_STATUS_IO_ERROR = 8,
  GESR_STATUS_FORMAT_ERROR = 9,
  GESR_STATUS_BUFFER_TOO_SMALL = 10,
  GESR_STATUS_VERIFY_FAILED = 11,
  GESR_STATUS_INTERNAL = 12,
};
#ifndef __cplusplus
typedef int32_t GesrStatus;
#endif // __cplusplus

/**
 * Opaque handle to a precomputed item cache.
 */
typedef struct GesrIndexHandle GesrIndexHandle;

/**
 * Opaque handle to a scoring model.
 */
typedef struct GesrModelHandle GesrModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; never null, do not free.
 */
const char *gesr_version(void);

/**
 * Message for the calling thread's most recent failure, or null. Valid
 * until the next failing call on the same thread; do not free.
 */
const char *gesr_last_error(void);

/**
 * Builds a freshly initialized desk-scale model. `variant` is one of
 * two_tower_baseline, gesr_basic, gesr_basic_minus_hma,
 * gesr_basic_minus_target_awareness, gesr_advanced.
 *
 * # Safety
 * `variant` must be nul-terminated; `out` must point to writable memory.
 */
GesrStatus gesr_model_new(const char *variant, uint64_t seed, struct GesrModelHandle **out);

/**
 * Loads a model from a checkpoint file written by `gesr_model_save` or
 * the CLI trainer.
 *
 * # Safety
 * `path` must be nul-terminated; `out` must point to writable memory.
 */
GesrStatus gesr_model_load(const char *path, struct GesrModelHandle **out);

/**
 * Writes the model to a checkpoint file; loading it back reproduces
 * bit-identical scores.
 *
 * # Safety
 * `model` must be a live handle; `path` must be nul-terminated.
 */
GesrStatus gesr_model_save(const struct GesrModelHandle *model, const char *path);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not freed before.
 */
void gesr_model_free(struct GesrModelHandle *model);

/**
 * Number of prediction tasks; scores have this many columns.
 *
 * # Safety
 * `model` must be a live handle; `out` must point to writable memory.
 */
GesrStatus gesr_model_tasks(const struct GesrModelHandle *model, uint32_t *out);

/**
 * Copies the model's checkpoint version (64 hex chars) into `buf` as a
 * nul-terminated string. `capacity` counts bytes including the nul.
 *
 * # Safety
 * `model` must be a live handle; `buf` must hold `capacity` bytes.
 */
GesrStatus gesr_model_version(const struct GesrModelHandle *model, char *buf, uintptr_t capacity);

/**
 * Scores one ranking request given as JSON (the CLI's dataset row
 * format). Writes candidates x tasks logits row-major into `out`.
 *
 * # Safety
 * `model` must be a live handle, `request_json` nul-terminated, `out`
 * sized for `capacity` doubles, and the two shape pointers writable.
 */
GesrStatus gesr_model_score_json(const struct GesrModelHandle *model,
                                 const char *request_json,
                                 double *out,
                                 uintptr_t capacity,
                                 uintptr_t *out_rows,
                                 uintptr_t *out_cols);

/**
 * Precomputes the item-side cache for a corpus given as a JSON array of
 * candidates. The index is tied to the model's checkpoint version.
 *
 * # Safety
 * `model` must be a live handle, `corpus_json` nul-terminated, `out`
 * writable.
 */
GesrStatus gesr_index_build_json(const struct GesrModelHandle *model,
                                 const char *corpus_json,
                                 struct GesrIndexHandle **out);

/**
 * Writes the index to a cache file.
 *
 * # Safety
 * `index` must be a live handle; `path` must be nul-terminated.
 */
GesrStatus gesr_index_save(const struct GesrIndexHandle *index, const char *path);

/**
 * Loads an index from a cache file.
 *
 * # Safety
 * `path` must be nul-terminated; `out` must point to writable memory.
 */
GesrStatus gesr_index_load(const char *path, struct GesrIndexHandle **out);

/**
 * Number of cached items.
 *
 * # Safety
 * `index` must be a live handle; `out` must point to writable memory.
 */
GesrStatus gesr_index_len(const struct GesrIndexHandle *index, uintptr_t *out);

/**
 * Releases an index handle. Null is ignored.
 *
 * # Safety
 * `index` must be null or a handle not freed before.
 */
void gesr_index_free(struct GesrIndexHandle *index);

/**
 * Scores a request through the item cache. Bit-identical to
 * `gesr_model_score_json` when the cache is fresh; returns
 * `GESR_STATUS_STALE_CACHE` if the index was built for a different
 * checkpoint and `GESR_STATUS_CACHE_MISS` if a candidate is not cached.
 *
 * # Safety
 * Same as `gesr_model_score_json`, plus `index` must be a live handle.
 */
GesrStatus gesr_score_cached_json(const struct GesrModelHandle *model,
                                  const struct GesrIndexHandle *index,
                                  const char *request_json,
                                  double *out,
                                  uintptr_t capacity,
                                  uintptr_t *out_rows,
                                  uintptr_t *out_cols);

/**
 * Runs the library's invariant suite (masks, matching oracle, gradient
 * checks, serving equivalence, metric cases). Returns
 * `GESR_STATUS_VERIFY_FAILED` with the report in `gesr_last_error` on
 * any violation.
 */
GesrStatus gesr_verify(uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GESR_H */
