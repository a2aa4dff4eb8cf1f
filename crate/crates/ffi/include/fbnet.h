#ifndef FBNET_H
#define FBNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Values per patch: bands × rows × columns.
 */
#define FBNET_PATCH_VALUES 1792

typedef enum FbnetStatus {
  FBNET_STATUS_OK = 0,
  FBNET_STATUS_NULL_POINTER = 1,
  FBNET_STATUS_INVALID_ARGUMENT = 2,
  FBNET_STATUS_IO = 3,
  FBNET_STATUS_FORMAT = 4,
  FBNET_STATUS_SHAPE = 5,
  FBNET_STATUS_NON_FINITE = 6,
  FBNET_STATUS_PANIC = 7,
} FbnetStatus;

/**
 * A loaded or freshly initialized model.
 */
typedef struct FbnetModel FbnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *fbnet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fbnet_version(void);

/**
 * Randomly initialized model of `variant` (`inet`, `inet_gap`, `fbnet`,
 * `fbnet_nogap`).
 *
 * # Safety
 * `variant` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FbnetStatus fbnet_model_init(const char *variant, uint64_t seed, struct FbnetModel **out);

/**
 * Loads a checkpoint written by `fbnet train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FbnetStatus fbnet_model_load(const char *path, struct FbnetModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void fbnet_model_free(struct FbnetModel *model);

/**
 * Writes the variant name into `buf` (NUL-terminated, truncated to
 * `len`); returns the full name length.
 *
 * # Safety
 * `model` must be a live handle and `buf` hold `len` bytes.
 */
size_t fbnet_model_variant(const struct FbnetModel *model, char *buf, size_t len);

/**
 * P(positive) for `count` patches laid out band-major, each
 * `FBNET_PATCH_VALUES` floats.
 *
 * # Safety
 * `values` must hold `count * FBNET_PATCH_VALUES` floats and `out` `count`.
 */
enum FbnetStatus fbnet_predict(const struct FbnetModel *model,
                               const float *values,
                               size_t count,
                               double *out);

/**
 * Normalized positive-class activation map of one patch, `resolution²`
 * floats in row-major order. `method` is `avg`, `cam`, `gradcam` or
 * `mpcnn-cam`.
 *
 * # Safety
 * `values` must hold `FBNET_PATCH_VALUES` floats and `out`
 * `resolution * resolution`.
 */
enum FbnetStatus fbnet_activation_map(const struct FbnetModel *model,
                                      const float *values,
                                      const char *method,
                                      size_t resolution,
                                      float *out);

/**
 * Pixel ROC AUC of one `height × width` score map against a 0/1 mask.
 *
 * # Safety
 * `scores` and `truth` must each hold `height * width` elements.
 */
enum FbnetStatus fbnet_roc_auc(const float *scores,
                               const uint8_t *truth,
                               size_t height,
                               size_t width,
                               double *out);

/**
 * TP / (TP + FP + FN); 0 when the denominator is 0.
 */
double fbnet_iou(uint64_t tp, uint64_t fp, uint64_t fn_);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FBNET_H */
