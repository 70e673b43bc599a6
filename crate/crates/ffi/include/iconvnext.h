#ifndef ICONVNEXT_H
#define ICONVNEXT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum IcntStatus {
  ICNT_STATUS_OK = 0,
  ICNT_STATUS_NULL_POINTER = 1,
  ICNT_STATUS_INVALID_ARGUMENT = 2,
  ICNT_STATUS_SHAPE = 3,
  ICNT_STATUS_IO = 4,
  ICNT_STATUS_CHECKPOINT = 5,
  ICNT_STATUS_CONFIG = 6,
  ICNT_STATUS_DATASET = 7,
  ICNT_STATUS_NON_FINITE = 8,
  ICNT_STATUS_WORKER_POOL = 9,
  ICNT_STATUS_IMAGE = 10,
  ICNT_STATUS_BUFFER_TOO_SMALL = 11,
  ICNT_STATUS_PANIC = 12,
} IcntStatus;

/**
 * Opaque model handle.
 */
typedef struct IcntModel IcntModel;

/**
 * Sizes a caller needs to lay out buffers.
 */
typedef struct IcntModelInfo {
  uintptr_t n_class;
  uintptr_t in_channels;
  uintptr_t image_size;
  /**
   * Width of the pre-logits features.
   */
  uintptr_t feature_dim;
} IcntModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes of writes.
 */
uintptr_t icnt_last_error_message(char *buf, uintptr_t len);

/**
 * Fixes the global worker pool size. Only the first call before any
 * inference can succeed.
 */
enum IcntStatus icnt_set_worker_threads(uintptr_t n);

/**
 * Loads a checkpoint written by `iconvnext train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum IcntStatus icnt_model_load(const char *path, struct IcntModel **out);

/**
 * Releases a handle from [`icnt_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not used afterwards.
 */
void icnt_model_free(struct IcntModel *model);

/**
 * # Safety
 * `model` must be a live handle and `info` valid for a write.
 */
enum IcntStatus icnt_model_info(const struct IcntModel *model, struct IcntModelInfo *info);

/**
 * Eval-mode logits for `n` images into `logits` (`n * n_class` floats).
 *
 * # Safety
 * `images` must hold `n * in_channels * image_size^2` floats and `logits`
 * be valid for `logits_len` writes.
 */
enum IcntStatus icnt_model_predict(const struct IcntModel *model,
                                   const float *images,
                                   uintptr_t n,
                                   float *logits,
                                   uintptr_t logits_len);

/**
 * Pre-logits features for `n` images into `features` (`n * feature_dim` floats).
 *
 * # Safety
 * As for [`icnt_model_predict`].
 */
enum IcntStatus icnt_model_features(const struct IcntModel *model,
                                    const float *images,
                                    uintptr_t n,
                                    float *features,
                                    uintptr_t features_len);

/**
 * Area under the ROC curve of `scores` against 0/1 `positive` flags.
 * Fails with `ICNT_STATUS_INVALID_ARGUMENT` when only one class is present.
 *
 * # Safety
 * `scores` and `positive` must hold `n` elements; `auc` must be valid for a write.
 */
enum IcntStatus icnt_binary_auc(const double *scores,
                                const uint8_t *positive,
                                uintptr_t n,
                                double *auc);

/**
 * Library version as a static NUL-terminated string.
 */
const char *icnt_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ICONVNEXT_H */
