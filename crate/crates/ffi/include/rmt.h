#ifndef RMT_H
#define RMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum RmtStatus {
  RMT_STATUS_OK = 0,
  RMT_STATUS_NULL_POINTER = 1,
  RMT_STATUS_INVALID_ARGUMENT = 2,
  RMT_STATUS_SHAPE = 3,
  RMT_STATUS_IO = 4,
  RMT_STATUS_CHECKPOINT = 5,
  RMT_STATUS_DATA = 6,
  RMT_STATUS_INTERNAL = 7,
} RmtStatus;

/**
 * Opaque model handle.
 */
typedef struct RmtModel RmtModel;

/**
 * Metrics over one map, normalized units.
 */
typedef struct RmtMetrics {
  double rmse;
  double ch_pred_err;
  double cov_pred_err;
  size_t n_roi_pixels;
} RmtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread; empty if none. Valid until the
 * next failing call on the same thread.
 */
const char *rmt_last_error(void);

/**
 * Library version as a static string.
 */
const char *rmt_version(void);

/**
 * Maps received power in dBm onto `[0, 1]`.
 */
double rmt_normalize_dbm(double p_rx_dbm);

/**
 * Inverse of [`rmt_normalize_dbm`] on `[0, 1]`.
 */
double rmt_denormalize_dbm(double value);

/**
 * Creates a freshly initialized model. `profile` is `desk`, `desk-mini` or
 * `paper`; `kind` is `rmt` or `baseline`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum RmtStatus rmt_model_new(const char *profile,
                             const char *kind,
                             uint64_t seed,
                             struct RmtModel **out);

/**
 * Loads a checkpoint. The architecture comes from the checkpoint's JSON
 * card when present; non-null `profile` / `kind` override it.
 *
 * # Safety
 * String arguments must be NUL-terminated or null where allowed; `out`
 * must be writable.
 */
enum RmtStatus rmt_model_load(const char *checkpoint,
                              const char *profile,
                              const char *kind,
                              struct RmtModel **out);

/**
 * Writes the parameters as an RMTC checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum RmtStatus rmt_model_save(const struct RmtModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void rmt_model_free(struct RmtModel *model);

/**
 * Input extent the model expects.
 *
 * # Safety
 * `model` must come from this library; outputs must be writable.
 */
enum RmtStatus rmt_model_input_size(const struct RmtModel *model, size_t *height, size_t *width);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * `model` must come from this library; `count` must be writable.
 */
enum RmtStatus rmt_model_param_count(const struct RmtModel *model, size_t *count);

/**
 * Predicts the normalized radio map for one layout. `roi` and `out` hold
 * `height * width` values. Outputs lie in `[0, 1]`: the single-precision
 * sigmoid rounds to the endpoints for large logits.
 *
 * # Safety
 * `model` must come from this library; `roi` must be readable and `out`
 * writable for `height * width` elements.
 */
enum RmtStatus rmt_model_predict(const struct RmtModel *model,
                                 const uint8_t *roi,
                                 size_t height,
                                 size_t width,
                                 size_t tx_row,
                                 size_t tx_col,
                                 float *out);

/**
 * Synthesizes one `size x size` sample from `seed`: the RoI mask, the
 * normalized radio map and the transmitter cell.
 *
 * # Safety
 * `roi_out` and `map_out` must be writable for `size * size` elements; the
 * transmitter outputs must be writable.
 */
enum RmtStatus rmt_generate_sample(uint64_t seed,
                                   size_t size,
                                   uint8_t *roi_out,
                                   float *map_out,
                                   size_t *tx_row,
                                   size_t *tx_col);

/**
 * RMSE, RoI channel error and coverage error of one predicted map.
 *
 * # Safety
 * `pred`, `truth` and `roi` must be readable for `height * width` elements;
 * `out` must be writable.
 */
enum RmtStatus rmt_metrics(const float *pred,
                           const float *truth,
                           const uint8_t *roi,
                           size_t height,
                           size_t width,
                           double threshold,
                           struct RmtMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RMT_H */
