#ifndef FOCUSNET_H
#define FOCUSNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FnStatus {
  FN_STATUS_OK = 0,
  FN_STATUS_NULL_ARGUMENT = 1,
  FN_STATUS_INVALID_ARGUMENT = 2,
  FN_STATUS_CONFIG = 3,
  FN_STATUS_DATA = 4,
  FN_STATUS_NUMERICAL = 5,
  FN_STATUS_PANIC = 6,
} FnStatus;

/**
 * Opaque model handle.
 */
typedef struct FnModel FnModel;

/**
 * Confusion counts and the five metrics for one mask pair.
 * `degenerate` has bit i set when metric i (SE, SP, AC, JI, DI) was 0/0.
 */
typedef struct FnMetrics {
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
  double se;
  double sp;
  double ac;
  double ji;
  double di;
  uint32_t degenerate;
} FnMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fn_version(void);

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the thread.
 */
const char *fn_last_error(void);

/**
 * Builds a freshly initialized model from `key = value` architecture text
 * (NULL selects the small default architecture).
 *
 * # Safety
 * `arch_text` is NULL or a NUL-terminated string; `out` is a valid pointer.
 */
enum FnStatus fn_model_build(const char *arch_text, uint64_t seed, struct FnModel **out);

/**
 * Loads a checkpoint written by the CLI or [`fn_model_save`].
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is a valid pointer.
 */
enum FnStatus fn_model_load(const char *path, struct FnModel **out);

/**
 * # Safety
 * `model` is a live handle; `path` is a NUL-terminated string.
 */
enum FnStatus fn_model_save(const struct FnModel *model, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` is NULL or a handle from this library that has not been freed.
 */
void fn_model_free(struct FnModel *model);

/**
 * Trainable parameter count, or 0 for a NULL handle.
 *
 * # Safety
 * `model` is NULL or a live handle.
 */
size_t fn_model_param_count(const struct FnModel *model);

/**
 * Expected input channels and square input size.
 *
 * # Safety
 * `model` is a live handle; `channels` and `size` are valid pointers.
 */
enum FnStatus fn_model_input_shape(const struct FnModel *model, size_t *channels, size_t *size);

/**
 * Eval-mode probabilities for `batch` images laid out `[batch, channels, size, size]`
 * with values in [0, 1]. Normalization stored in the checkpoint is applied first.
 * `out` receives `batch · size · size` probabilities.
 *
 * # Safety
 * `input` holds `batch·channels·size·size` floats and `out` has room for `out_len`.
 */
enum FnStatus fn_model_predict(const struct FnModel *model,
                               const float *input,
                               size_t batch,
                               float *out,
                               size_t out_len);

/**
 * Confusion counts and metrics for two binary masks of `len` bytes (nonzero = foreground).
 *
 * # Safety
 * `pred` and `gt` hold `len` bytes; `out` is a valid pointer.
 */
enum FnStatus fn_metrics(const uint8_t *pred, const uint8_t *gt, size_t len, struct FnMetrics *out);

/**
 * Smoothed dice loss over `len` probabilities and binary ground-truth values.
 *
 * # Safety
 * `prob` and `gt` hold `len` floats; `out` is a valid pointer.
 */
enum FnStatus fn_dice_loss(const float *prob,
                           const float *gt,
                           size_t len,
                           double smooth,
                           double *out);

/**
 * Writes `n` synthetic image/mask pairs under `dir` (images/ and masks/).
 *
 * # Safety
 * `dir` is a NUL-terminated string.
 */
enum FnStatus fn_synth_write(size_t n,
                             size_t size,
                             size_t channels,
                             uint64_t seed,
                             const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOCUSNET_H */
