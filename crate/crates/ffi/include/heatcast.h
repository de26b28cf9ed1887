#ifndef HEATCAST_H
#define HEATCAST_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HcStatus {
  HC_STATUS_OK = 0,
  HC_STATUS_NULL_POINTER = 1,
  HC_STATUS_INVALID_ARGUMENT = 2,
  HC_STATUS_SHAPE_MISMATCH = 3,
  HC_STATUS_NUMERICAL = 4,
  HC_STATUS_IO = 5,
  HC_STATUS_PANIC = 6,
} HcStatus;

/**
 * Precomputed wavelet filters for one grid.
 */
typedef struct HcFilterBank HcFilterBank;

/**
 * Fitted linear pattern model.
 */
typedef struct HcGaModel HcGaModel;

/**
 * Any model restored from a checkpoint directory.
 */
typedef struct HcModel HcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the library.
 */
const char *hc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hc_version(void);

/**
 * Fit a GA model on `n` row-major samples of length `n_lat * n_lon * channels`.
 *
 * # Safety
 * `x` must hold `n * d` values, `targets` `n` values, and `out` must be writable.
 */
enum HcStatus hc_ga_fit(const double *x,
                        size_t n,
                        const double *targets,
                        size_t n_lat,
                        size_t n_lon,
                        size_t channels,
                        double epsilon,
                        struct HcGaModel **out);

/**
 * Input length expected by a GA model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t hc_ga_dim(const struct HcGaModel *model);

/**
 * Copy the pattern into `out` (length `hc_ga_dim`) and the residual scale into `sigma`.
 *
 * # Safety
 * `model` must be a live handle, `out` valid for `len` writes, `sigma` writable or null.
 */
enum HcStatus hc_ga_pattern(const struct HcGaModel *model, double *out, size_t len, double *sigma);

/**
 * Predict mean and spread for `n` samples.
 *
 * # Safety
 * `x` must hold `n * hc_ga_dim` values; `mu` and `sigma` must be valid for `n` writes.
 */
enum HcStatus hc_ga_predict(const struct HcGaModel *model,
                            const double *x,
                            size_t n,
                            double *mu,
                            double *sigma);

/**
 * # Safety
 * `model` must be null or a handle from `hc_ga_fit` not yet freed.
 */
void hc_ga_free(struct HcGaModel *model);

/**
 * Load a model from a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated UTF-8 path and `out` writable.
 */
enum HcStatus hc_model_load(const char *dir, struct HcModel **out);

/**
 * Input length expected by a loaded model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t hc_model_input_dim(const struct HcModel *model);

/**
 * # Safety
 * As for `hc_ga_predict`, with `hc_model_input_dim` as the row length.
 */
enum HcStatus hc_model_predict(const struct HcModel *model,
                               const double *x,
                               size_t n,
                               double *mu,
                               double *sigma);

/**
 * # Safety
 * `model` must be null or a handle from `hc_model_load` not yet freed.
 */
void hc_model_free(struct HcModel *model);

/**
 * Build filters for an `n_lat x n_lon` field; both sides must be multiples of `2^scales`.
 *
 * # Safety
 * `out` must be writable.
 */
enum HcStatus hc_filter_bank_new(size_t scales,
                                 size_t orientations,
                                 size_t n_lat,
                                 size_t n_lon,
                                 struct HcFilterBank **out);

/**
 * Output shape `(height, width, channels)` of a transform up to `max_order`.
 *
 * # Safety
 * `bank` must be a live handle; the out pointers must be writable.
 */
enum HcStatus hc_filter_bank_output_shape(const struct HcFilterBank *bank,
                                          size_t max_order,
                                          size_t *height,
                                          size_t *width,
                                          size_t *channels);

/**
 * Scattering coefficients of one field, layout `(height, width, channel)` with channel fastest.
 *
 * # Safety
 * `x` must hold `n_lat * n_lon` values and `out` `out_len` writable values.
 */
enum HcStatus hc_filter_bank_scatter(const struct HcFilterBank *bank,
                                     const double *x,
                                     size_t max_order,
                                     double *out,
                                     size_t out_len);

/**
 * # Safety
 * `bank` must be null or a handle from `hc_filter_bank_new` not yet freed.
 */
void hc_filter_bank_free(struct HcFilterBank *bank);

/**
 * CRPS of a normal forecast.
 *
 * # Safety
 * `out` must be writable.
 */
enum HcStatus hc_crps_gaussian(double mu, double sigma, double y, double *out);

/**
 * Negative log-likelihood of a normal forecast.
 *
 * # Safety
 * `out` must be writable.
 */
enum HcStatus hc_nll_gaussian(double mu, double sigma, double y, double *out);

/**
 * Binary cross entropy of the event `y >= threshold`.
 *
 * # Safety
 * `out` must be writable.
 */
enum HcStatus hc_bce_gaussian(double mu, double sigma, double y, double threshold, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEATCAST_H */
