#ifndef CONFGUIDE_H
#define CONFGUIDE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CgStatus {
  CG_STATUS_OK = 0,
  CG_STATUS_NULL_POINTER = 1,
  CG_STATUS_IO = 2,
  CG_STATUS_PARSE = 3,
  CG_STATUS_SCHEMA = 4,
  CG_STATUS_RANGE = 5,
  CG_STATUS_EMPTY = 6,
  CG_STATUS_INVALID_GRID = 7,
  CG_STATUS_INVALID_ARGUMENT = 8,
  CG_STATUS_PANIC = 99,
} CgStatus;

/**
 * Outcome of one calibration.
 */
typedef struct CgCalibration CgCalibration;

/**
 * Scores and labels of one split.
 */
typedef struct CgDataset CgDataset;

/**
 * Candidate thresholds for calibration.
 */
typedef struct CgLambdaGrid CgLambdaGrid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *cg_last_error(void);

/**
 * Loads a dataset from score CSV, label CSV and schema JSON files.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum CgStatus cg_dataset_load(const char *scores_path,
                              const char *labels_path,
                              const char *schema_path,
                              struct CgDataset **out);

/**
 * Builds a dataset from row-major `n x k` arrays; labels must be 0 or 1.
 *
 * # Safety
 * `scores` and `labels` must each point to `n * k` readable elements.
 */
enum CgStatus cg_dataset_from_arrays(size_t n,
                                     size_t k,
                                     const double *scores,
                                     const uint8_t *labels,
                                     struct CgDataset **out);

/**
 * # Safety
 * `dataset` must be a live handle; `n` and `k` must be writable.
 */
enum CgStatus cg_dataset_shape(const struct CgDataset *dataset, size_t *n, size_t *k);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void cg_dataset_free(struct CgDataset *dataset);

/**
 * Grid from explicit values: strictly ascending, within [0, 1], ending at 1.
 *
 * # Safety
 * `values` must point to `len` readable doubles; `out` must be writable.
 */
enum CgStatus cg_lambda_grid_new(const double *values, size_t len, struct CgLambdaGrid **out);

/**
 * Uniform grid `{0, 1/steps, ..., 1}`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CgStatus cg_lambda_grid_uniform(size_t steps, struct CgLambdaGrid **out);

/**
 * # Safety
 * `grid` must be null or a handle not yet freed.
 */
void cg_lambda_grid_free(struct CgLambdaGrid *grid);

/**
 * Calibrates the threshold for false-negative rate at most `alpha`.
 * A null `grid` means the default 1001-point grid.
 *
 * # Safety
 * `dataset` must be a live handle, `grid` null or live, `out` writable.
 */
enum CgStatus cg_calibrate(const struct CgDataset *dataset,
                           double alpha,
                           const struct CgLambdaGrid *grid,
                           struct CgCalibration **out);

/**
 * # Safety
 * `calibration` must be a live handle; out pointers must be writable.
 */
enum CgStatus cg_calibration_lambda_hat(const struct CgCalibration *calibration,
                                        double *lambda_hat,
                                        bool *vacuous);

/**
 * Copies the adjusted risk curve. Call with null buffers to get the length
 * in `len`; otherwise `len` must hold the buffer capacity.
 *
 * # Safety
 * `calibration` must be live; buffers, when non-null, must hold `*len`
 * doubles.
 */
enum CgStatus cg_calibration_curve(const struct CgCalibration *calibration,
                                   double *lambdas,
                                   double *risks,
                                   size_t *len);

/**
 * # Safety
 * `calibration` must be null or a handle not yet freed.
 */
void cg_calibration_free(struct CgCalibration *calibration);

/**
 * Writes 1 into `mask[j]` when class `j` is in the prediction set at
 * `lambda`, else 0.
 *
 * # Safety
 * `scores` must hold `k` doubles and `mask` room for `k` bytes.
 */
enum CgStatus cg_prediction_mask(const double *scores, size_t k, double lambda, uint8_t *mask);

/**
 * Mean per-case false-negative rate of the sets at `lambda`.
 *
 * # Safety
 * `dataset` must be live and `out` writable.
 */
enum CgStatus cg_empirical_fnr(const struct CgDataset *dataset, double lambda, double *out);

/**
 * Sweeps `alphas` (strictly ascending) and returns the start of the longest
 * run of equal thresholds. A null `grid` means the default grid.
 *
 * # Safety
 * `alphas` must hold `n_alphas` doubles; `dataset` live; `grid` null or
 * live; `out` writable.
 */
enum CgStatus cg_select_alpha(const struct CgDataset *dataset,
                              const double *alphas,
                              size_t n_alphas,
                              const struct CgLambdaGrid *grid,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFGUIDE_H */
