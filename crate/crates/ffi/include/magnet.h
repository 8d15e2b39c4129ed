#ifndef MAGNET_H
#define MAGNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MAGNET_STATUS_OK = 0,
  MAGNET_STATUS_NULL_POINTER = 1,
  MAGNET_STATUS_INVALID_UTF8 = 2,
  MAGNET_STATUS_BUFFER_SIZE = 3,
  MAGNET_STATUS_VALIDATION = 4,
  MAGNET_STATUS_CONFIG = 5,
  MAGNET_STATUS_NUMERIC = 6,
  MAGNET_STATUS_IO = 7,
  MAGNET_STATUS_PARSE = 8,
  MAGNET_STATUS_PANIC = 9,
} MagnetStatus;

/**
 * Subject records loaded from disk or generated.
 */
typedef struct MagnetCohort MagnetCohort;

/**
 * A trained model checkpoint.
 */
typedef struct MagnetModel MagnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *magnet_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *magnet_version(void);

/**
 * Generates a synthetic cohort with default coupling and noise.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
MagnetStatus magnet_cohort_generate(uint64_t seed,
                                    size_t subjects,
                                    size_t nodes,
                                    MagnetCohort **out);

/**
 * Loads a cohort directory written by `magnet gen-data` or
 * [`magnet_cohort_write`].
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
MagnetStatus magnet_cohort_load(const char *dir, MagnetCohort **out);

/**
 * Writes the cohort as CSV files plus a manifest.
 *
 * # Safety
 * `cohort` must be a live handle; `dir` a NUL-terminated string.
 */
MagnetStatus magnet_cohort_write(const MagnetCohort *cohort, const char *dir);

/**
 * Number of subjects, or 0 for a null handle.
 *
 * # Safety
 * `cohort` must be null or a live handle.
 */
size_t magnet_cohort_len(const MagnetCohort *cohort);

/**
 * # Safety
 * `cohort` must be null or a handle not yet freed.
 */
void magnet_cohort_free(MagnetCohort *cohort);

/**
 * Fits a model on the whole cohort. `config_json` is a training
 * configuration in the CLI's JSON format; NULL selects the defaults.
 *
 * # Safety
 * `cohort` must be a live handle, `config_json` null or NUL-terminated,
 * `out` writable.
 */
MagnetStatus magnet_model_train(const MagnetCohort *cohort,
                                const char *config_json,
                                MagnetModel **out);

/**
 * Loads a checkpoint written by `magnet train` or [`magnet_model_save`].
 *
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
MagnetStatus magnet_model_load(const char *path, MagnetModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
MagnetStatus magnet_model_save(const MagnetModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void magnet_model_free(MagnetModel *model);

/**
 * Predicts one score per subject into `out`, which must hold exactly
 * `magnet_cohort_len(cohort)` values. Subjects whose graph is degenerate
 * get NaN.
 *
 * # Safety
 * `model` and `cohort` must be live handles; `out` must point to `len`
 * writable doubles.
 */
MagnetStatus magnet_model_predict(const MagnetModel *model,
                                  const MagnetCohort *cohort,
                                  double *out,
                                  size_t len);

/**
 * Counts simple paths of exactly `radius` edges between `from` and `to` in
 * the graph given by the row-major `n`×`n` adjacency (nonzero = edge).
 *
 * # Safety
 * `adjacency` must point to `n * n` readable bytes; `out` must be writable.
 */
MagnetStatus magnet_count_detours(const uint8_t *adjacency,
                                  size_t n,
                                  size_t from,
                                  size_t to,
                                  size_t radius,
                                  uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAGNET_H */
