#ifndef VIEWFREE_H
#define VIEWFREE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. The nonzero library codes match the command line exit
 * codes.
 */
typedef enum VfStatus {
  VF_STATUS_OK = 0,
  /**
   * Invalid configuration or argument.
   */
  VF_STATUS_CONFIG = 2,
  /**
   * Unreadable, missing or malformed data.
   */
  VF_STATUS_DATA = 3,
  /**
   * Non-finite numbers.
   */
  VF_STATUS_DIVERGENCE = 4,
  VF_STATUS_NULL_POINTER = 10,
  VF_STATUS_INVALID_UTF8 = 11,
  VF_STATUS_BUFFER_TOO_SMALL = 12,
  VF_STATUS_PANIC = 13,
} VfStatus;

/**
 * A point cloud.
 */
typedef struct VfCloud VfCloud;

/**
 * A trained or freshly initialized model.
 */
typedef struct VfModel VfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *vf_last_error_message(void);

void vf_clear_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vf_version(void);

/**
 * Build a cloud from `n` interleaved `x y z` triples.
 *
 * # Safety
 * `xyz` must point to `3 * n` readable doubles and `out` must be valid
 * for writing.
 */
enum VfStatus vf_cloud_new(const double *xyz, size_t n, struct VfCloud **out);

/**
 * Read a PCF1 or ASCII `x y z` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writing.
 */
enum VfStatus vf_cloud_read(const char *path, struct VfCloud **out);

/**
 * Write a cloud as PCF1.
 *
 * # Safety
 * `cloud` must be a live handle and `path` a NUL-terminated string.
 */
enum VfStatus vf_cloud_write(const struct VfCloud *cloud, const char *path);

/**
 * Number of points, or 0 for a null handle.
 *
 * # Safety
 * `cloud` must be null or a live handle.
 */
size_t vf_cloud_len(const struct VfCloud *cloud);

/**
 * Copy the points into `xyz`, which holds `capacity` doubles.
 *
 * # Safety
 * `cloud` must be a live handle and `xyz` writable for `capacity`
 * doubles.
 */
enum VfStatus vf_cloud_copy_points(const struct VfCloud *cloud, double *xyz, size_t capacity);

/**
 * # Safety
 * `cloud` must be null or a handle not yet freed.
 */
void vf_cloud_free(struct VfCloud *cloud);

/**
 * Initialize a model from TOML configuration text (null for defaults)
 * and a seed.
 *
 * # Safety
 * `config_toml` must be null or NUL-terminated; `out` valid for writing.
 */
enum VfStatus vf_model_new(const char *config_toml, uint64_t seed, struct VfModel **out);

/**
 * Load the model stored in a checkpoint (its sidecar must sit next to
 * it).
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid for writing.
 */
enum VfStatus vf_model_load(const char *path, struct VfModel **out);

/**
 * Trainable scalar count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t vf_model_param_count(const struct VfModel *model);

/**
 * Points in every completion, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t vf_model_output_points(const struct VfModel *model);

/**
 * Smallest partial cloud the model accepts, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t vf_model_min_input_points(const struct VfModel *model);

/**
 * Complete `partial`; the result is a new cloud owned by the caller.
 *
 * # Safety
 * Handles must be live and `out` valid for writing.
 */
enum VfStatus vf_model_complete(const struct VfModel *model,
                                const struct VfCloud *partial,
                                struct VfCloud **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void vf_model_free(struct VfModel *model);

/**
 * Symmetric chamfer distance (mean squared nearest-neighbor distance
 * each way).
 *
 * # Safety
 * Handles must be live and `out` valid for writing.
 */
enum VfStatus vf_chamfer_distance(const struct VfCloud *a, const struct VfCloud *b, double *out);

/**
 * F-score of `prediction` against `truth` at distance `tau`.
 *
 * # Safety
 * Handles must be live and `out` valid for writing.
 */
enum VfStatus vf_f_score(const struct VfCloud *truth,
                         const struct VfCloud *prediction,
                         double tau,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIEWFREE_H */
