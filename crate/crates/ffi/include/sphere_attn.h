#ifndef SPHERE_ATTN_H
#define SPHERE_ATTN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum SaStatus {
  SA_STATUS_OK = 0,
  SA_STATUS_NULL_POINTER = 1,
  SA_STATUS_SHAPE = 2,
  SA_STATUS_CONFIG = 3,
  SA_STATUS_INDEX = 4,
  SA_STATUS_NUMERIC = 5,
  SA_STATUS_FORMAT = 6,
  SA_STATUS_SIZE = 7,
  SA_STATUS_IO = 8,
  SA_STATUS_INVALID_UTF8 = 9,
  SA_STATUS_PANIC = 10,
} SaStatus;

/*
 Partition mode for [`sa_partition_stats_json`].
 */
typedef enum SaMode {
  SA_MODE_RADIAL = 0,
  SA_MODE_CUBIC = 1,
} SaMode;

/*
 A point cloud: positions plus per-point features.
 */
typedef struct SaCloud SaCloud;

/*
 Attention weights (f32) together with window and encoding settings.
 */
typedef struct SaModel SaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or NULL after a
 success. Valid until the next library call on the same thread.
 */
const char *sa_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sa_version(void);

/*
 Reads an SPC1 file.

 # Safety
 `path` must be NUL-terminated; `out` must be writable.
 */
enum SaStatus sa_cloud_load(const char *path, struct SaCloud **out);

/*
 Writes a cloud as SPC1.

 # Safety
 `cloud` must be a live handle and `path` NUL-terminated.
 */
enum SaStatus sa_cloud_save(const struct SaCloud *cloud, const char *path);

/*
 Builds a cloud from caller buffers: `positions` holds `n × 3` and
 `features` `n × feature_dim` floats, row-major. `features` may be NULL
 when `feature_dim` is 0. The data is copied.

 # Safety
 The buffers must hold the stated number of floats.
 */
enum SaStatus sa_cloud_new(const float *positions,
                           const float *features,
                           size_t n,
                           size_t feature_dim,
                           struct SaCloud **out);

/*
 Generates a synthetic beam scene (inclinations spread over 60°..100°).

 # Safety
 `out` must be writable.
 */
enum SaStatus sa_cloud_generate(size_t beam_count,
                                size_t azimuth_steps,
                                double r_min,
                                double r_max,
                                double dropout_prob,
                                size_t feature_dim,
                                uint64_t seed,
                                struct SaCloud **out);

/*
 Number of points, or 0 for NULL.

 # Safety
 `cloud` must be NULL or a live handle.
 */
size_t sa_cloud_len(const struct SaCloud *cloud);

/*
 Feature length per point, or 0 for NULL.

 # Safety
 `cloud` must be NULL or a live handle.
 */
size_t sa_cloud_feature_dim(const struct SaCloud *cloud);

/*
 Releases a cloud. NULL is ignored.

 # Safety
 `cloud` must be NULL or a handle not yet freed.
 */
void sa_cloud_free(struct SaCloud *cloud);

/*
 Reads SPW1 weights; windows start at the defaults (2°×2° up to 120 m,
 5 m cubes).

 # Safety
 `path` must be NUL-terminated; `out` must be writable.
 */
enum SaStatus sa_model_load(const char *path, struct SaModel **out);

/*
 Seeded random weights. `heads` must be even.

 # Safety
 `out` must be writable.
 */
enum SaStatus sa_model_random(size_t heads,
                              size_t head_dim,
                              size_t table_len,
                              uint64_t seed,
                              struct SaModel **out);

/*
 Writes the model's weights as SPW1.

 # Safety
 `model` must be a live handle and `path` NUL-terminated.
 */
enum SaStatus sa_model_save(const struct SaModel *model, const char *path);

/*
 Replaces the window sizes; position-encoding bins are re-derived. The
 model is left unchanged on error.

 # Safety
 `model` must be a live handle.
 */
enum SaStatus sa_model_set_windows(struct SaModel *model,
                                   double delta_theta,
                                   double delta_phi,
                                   double r_max,
                                   double cubic_side);

/*
 Channel count `c = heads × head_dim`, or 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t sa_model_channels(const struct SaModel *model);

/*
 Releases a model. NULL is ignored.

 # Safety
 `model` must be NULL or a handle not yet freed.
 */
void sa_model_free(struct SaModel *model);

/*
 Runs the attention layer. `out` receives `len(cloud) × channels` floats,
 row-major in input order; `out_len` must equal that product.

 # Safety
 Handles must be live and `out` must hold `out_len` floats.
 */
enum SaStatus sa_forward(const struct SaModel *model,
                         const struct SaCloud *cloud,
                         float *out,
                         size_t out_len);

/*
 Partition statistics as a JSON string, using the model's windows.
 Release the string with [`sa_string_free`].

 # Safety
 Handles must be live; `out_json` must be writable.
 */
enum SaStatus sa_partition_stats_json(const struct SaModel *model,
                                      const struct SaCloud *cloud,
                                      enum SaMode mode,
                                      char **out_json);

/*
 Releases a string returned by this library. NULL is ignored.

 # Safety
 `s` must be NULL or a string from this library not yet freed.
 */
void sa_string_free(char *s);

/*
 Exponentially split position index of a signed relative radius, or -1
 when `table_len` is odd or below 4, or `a` is not positive.
 */
int64_t sa_exp_split_index(double r, double a, size_t table_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPHERE_ATTN_H */
