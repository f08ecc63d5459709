#ifndef SEPSIS_FFI_H
#define SEPSIS_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_IO = 3,
  SF_STATUS_PARSE = 4,
  SF_STATUS_CHECKPOINT = 5,
  SF_STATUS_SHAPE = 6,
  SF_STATUS_DATA = 7,
  SF_STATUS_PANIC = 8,
} SfStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct SfModel SfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint written by `sepsis train`. On success `*out` owns a
 * handle that must be released with [`sf_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SfStatus sf_model_load(const char *path, struct SfModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`sf_model_load`] and not be used afterwards.
 */
void sf_model_free(struct SfModel *model);

/**
 * Horizon (rows), feature count (columns) and token budget of a model.
 *
 * # Safety
 * `model` must be a live handle; output pointers must be valid.
 */
enum SfStatus sf_model_dims(const struct SfModel *model,
                            size_t *horizon,
                            size_t *features,
                            size_t *max_len);

/**
 * Positive-class probability for one patient.
 *
 * `matrix` is the imputed, unstandardized `rows × cols` hourly matrix in
 * row-major order; it is standardized with the checkpoint's training
 * statistics. `text` holds the raw notes and goes through leakage removal
 * and cleaning with the built-in stop-word list; it may be null when the
 * checkpoint mode ignores notes.
 *
 * # Safety
 * `matrix` must point to `rows * cols` doubles; `text`, if not null, must be
 * NUL-terminated; `out_prob` must be valid.
 */
enum SfStatus sf_model_predict(const struct SfModel *model,
                               const double *matrix,
                               size_t rows,
                               size_t cols,
                               const char *text,
                               double *out_prob);

/**
 * Ablation mode of a model as a static NUL-terminated string, or null for
 * a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
const char *sf_model_mode(const struct SfModel *model);

/**
 * Area under the ROC curve with ties counted as one half.
 *
 * # Safety
 * `scores` and `labels` must point to `n` elements; `out` must be valid.
 */
enum SfStatus sf_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Dense interpolation of `len × dim` row-major rows into `coeff × dim`
 * values written to `out`.
 *
 * # Safety
 * `rows` must point to `len * dim` doubles and `out` to room for
 * `coeff * dim`.
 */
enum SfStatus sf_dense_interpolate(const double *rows,
                                   size_t len,
                                   size_t dim,
                                   size_t coeff,
                                   double *out);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *sf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sf_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEPSIS_FFI_H */
