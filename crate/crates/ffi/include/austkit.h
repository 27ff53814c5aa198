#ifndef AUSTKIT_H
#define AUSTKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  AUSTKIT_STATUS_OK = 0,
  /**
   * Null pointer, bad size or out-of-range value.
   */
  AUSTKIT_STATUS_INVALID_ARGUMENT = 1,
  AUSTKIT_STATUS_IO = 2,
  /**
   * Malformed checkpoint, image, manifest or config.
   */
  AUSTKIT_STATUS_FORMAT = 3,
  /**
   * NaN or infinity inside the computation.
   */
  AUSTKIT_STATUS_NUMERIC = 4,
  AUSTKIT_STATUS_PANIC = 5,
} AustkitStatus;

/**
 * Opaque model handle.
 */
typedef struct AustkitModel AustkitModel;

typedef struct {
  /**
   * Average precision in percent; meaningful only when `has_ap` is 1.
   */
  double ap;
  /**
   * 0 when the ground truth has no positive pixel.
   */
  int32_t has_ap;
  double f1;
  /**
   * Percent.
   */
  double iou;
} AustkitMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *austkit_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next austkit call on the same thread.
 */
const char *austkit_last_error_message(void);

/**
 * Load a checkpoint written by `austkit train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
AustkitStatus austkit_model_load(const char *path, AustkitModel **out);

/**
 * Release a handle from [`austkit_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from `austkit_model_load` and not be freed twice.
 */
void austkit_model_free(AustkitModel *model);

/**
 * Input size the model was trained at.
 *
 * # Safety
 * All pointers must be valid; `model` must be a live handle.
 */
AustkitStatus austkit_model_input_size(const AustkitModel *model, size_t *height, size_t *width);

/**
 * Predict the inharmonious-region mask of one image.
 *
 * `rgb` holds `height * width * 3` bytes; `labels` holds `height * width`
 * class ids and may be null unless the model uses semantic voting.
 * `out_mask` receives `height * width` probabilities.
 *
 * # Safety
 * Buffers must have the stated lengths; `model` must be a live handle.
 */
AustkitStatus austkit_model_predict(const AustkitModel *model,
                                    const uint8_t *rgb,
                                    size_t height,
                                    size_t width,
                                    const uint8_t *labels,
                                    double *out_mask);

/**
 * AP, F1 and IoU of one prediction. `gt` is nonzero for inharmonious
 * pixels; `pred` values must lie in `[0, 1]`.
 *
 * # Safety
 * `pred` and `gt` must hold `height * width` values; `out` must be writable.
 */
AustkitStatus austkit_metrics(const double *pred,
                              const uint8_t *gt,
                              size_t height,
                              size_t width,
                              double threshold,
                              AustkitMetrics *out);

/**
 * Write `n` synthetic composites to `out_dir` in the layout `austkit gen`
 * produces. Regions per image are drawn from `min_regions..=max_regions`.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
AustkitStatus austkit_dataset_generate(const char *out_dir,
                                       size_t n,
                                       uint64_t seed,
                                       size_t min_regions,
                                       size_t max_regions);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUSTKIT_H */
