#ifndef PLAB_H
#define PLAB_H

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every call.
 */
typedef enum {
  PLAB_STATUS_OK = 0,
  PLAB_STATUS_NULL_POINTER = 1,
  PLAB_STATUS_INVALID_UTF8 = 2,
  PLAB_STATUS_INVALID_CONFIG = 3,
  PLAB_STATUS_INVALID_SHAPE = 4,
  PLAB_STATUS_NUMERIC_OVERFLOW = 5,
  PLAB_STATUS_STATE_ERROR = 6,
  PLAB_STATUS_INCONSISTENT_SITES = 7,
  PLAB_STATUS_EMPTY_WINDOW = 8,
  PLAB_STATUS_INVALID_THRESHOLD = 9,
  PLAB_STATUS_TOO_FEW_SITES = 10,
  PLAB_STATUS_NOT_FOUND = 11,
  PLAB_STATUS_INVALID_ARCH = 12,
  PLAB_STATUS_NOT_STARTED = 13,
  PLAB_STATUS_IO_ERROR = 14,
  PLAB_STATUS_BUFFER_TOO_SMALL = 15,
  PLAB_STATUS_PANIC = 16,
} PlabStatus;

typedef enum {
  PLAB_METRIC_REDO = 0,
  PLAB_METRIC_GRAMA = 1,
} PlabMetric;

/**
 * Running per-site activity sums for one model.
 */
typedef struct PlabAccumulator PlabAccumulator;

/**
 * A network plus the cache of its last forward pass.
 */
typedef struct PlabModel PlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call on the same thread.
 */
const char *plab_last_error(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void plab_string_free(char *s);

/**
 * Builds a network from an architecture JSON object. `input_dim` and
 * `output_dim` must be set in the JSON.
 *
 * # Safety
 * `arch_json` must be a NUL-terminated string; `out` must be writable.
 */
PlabStatus plab_model_new(const char *arch_json, uint64_t seed, PlabModel **out);

/**
 * # Safety
 * `model` must come from [`plab_model_new`] and not have been freed.
 */
void plab_model_free(PlabModel *model);

/**
 * Input width, output width and number of neuron sites.
 *
 * # Safety
 * `model` must be a live handle; the out pointers may be NULL.
 */
PlabStatus plab_model_dims(const PlabModel *model,
                           size_t *input_dim,
                           size_t *output_dim,
                           size_t *num_sites);

/**
 * Forward pass on a row-major `[rows, input_dim]` batch; writes the
 * `[rows, output_dim]` result into `out`.
 *
 * # Safety
 * `input` must hold `rows * input_dim` values and `out` `out_len` values.
 */
PlabStatus plab_model_forward(PlabModel *model,
                              const double *input,
                              size_t rows,
                              double *out,
                              size_t out_len);

/**
 * Backward pass from the gradient at the output of the last forward. Tap
 * records go into `acc` when it is non-NULL.
 *
 * # Safety
 * `grad` must hold `rows * output_dim` values of the last forward.
 */
PlabStatus plab_model_backward(PlabModel *model,
                               const double *grad,
                               size_t len,
                               PlabAccumulator *acc);

/**
 * Empty accumulator over the active sites of `model`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
PlabStatus plab_accumulator_new(const PlabModel *model, PlabAccumulator **out);

/**
 * # Safety
 * `acc` must come from [`plab_accumulator_new`] and not have been freed.
 */
void plab_accumulator_free(PlabAccumulator *acc);

/**
 * Normalized scores of every site in site order.
 *
 * # Safety
 * `out` must hold `out_len` values.
 */
PlabStatus plab_accumulator_scores(const PlabAccumulator *acc,
                                   PlabMetric metric,
                                   double *out,
                                   size_t out_len);

/**
 * Fraction of sites whose score is `<= tau`.
 *
 * # Safety
 * `acc` must be a live handle; `ratio` must be writable.
 */
PlabStatus plab_accumulator_inactive_ratio(const PlabAccumulator *acc,
                                           PlabMetric metric,
                                           double tau,
                                           double *ratio);

/**
 * Clears the accumulated sums.
 *
 * # Safety
 * `acc` must be a live handle.
 */
PlabStatus plab_accumulator_clear(PlabAccumulator *acc);

/**
 * Runs an experiment config (JSON text) into `out_dir`. On success
 * `summary_json` (when non-NULL) receives the summary, to be released with
 * [`plab_string_free`].
 *
 * # Safety
 * String arguments must be NUL-terminated; `summary_json` may be NULL.
 */
PlabStatus plab_run_config(const char *config_json, const char *out_dir, char **summary_json);

/**
 * Runs the invariant battery; `passed` receives 1 when every property holds.
 *
 * # Safety
 * `passed` must be writable; `report` may be NULL.
 */
PlabStatus plab_verify(uint64_t seed, int32_t *passed, char **report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLAB_H */
