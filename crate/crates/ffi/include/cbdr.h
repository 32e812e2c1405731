#ifndef CBDR_H
#define CBDR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CBDR_OK 0

#define CBDR_ERR_NULL_POINTER 1

#define CBDR_ERR_INVALID_ARGUMENT 2

#define CBDR_ERR_INVALID_DATA 3

#define CBDR_ERR_ESTIMATION 4

#define CBDR_ERR_IO 5

#define CBDR_ERR_PANIC 6

#define CBDR_ESTIMATOR_UDR 0

#define CBDR_ESTIMATOR_IDR 1

#define CBDR_ESTIMATOR_CBDR 2

#define CBDR_ESTIMATOR_CBDR_STAR 3

#define CBDR_DESIGN_X 0

#define CBDR_DESIGN_XDAGGER 1

#define CBDR_IMPUTE_ZERO 0

#define CBDR_IMPUTE_MEDIAN 1

#define CBDR_IMPUTE_LINEAR 2

#define CBDR_IMPUTE_INTERACT 3

#define CBDR_BALANCE_MOMENTS1 0

#define CBDR_BALANCE_MOMENTS2 1

#define CBDR_BALANCE_FULL 2

#define CBDR_CONSTRAINT_UNCONSTRAINED 0

#define CBDR_CONSTRAINT_SPHERE 1

#define CBDR_CORRECTION_MOMENT 0

#define CBDR_CORRECTION_SCORE 1

#define CBDR_TRUTH_LINEAR 0

#define CBDR_TRUTH_NONLINEAR 1

/**
 * Opaque dataset handle.
 */
typedef struct CbdrDataset CbdrDataset;

/**
 * Opaque linear rule handle.
 */
typedef struct CbdrRule CbdrRule;

/**
 * Estimation settings. Fill with `cbdr_estimate_options_default`.
 */
typedef struct CbdrEstimateOptions {
  int32_t balance;
  int32_t constraint;
  int32_t correction;
  int32_t imputation;
  uint64_t seed;
} CbdrEstimateOptions;

/**
 * Rule search budget. Fill with `cbdr_search_options_default`.
 */
typedef struct CbdrSearchOptions {
  size_t restarts;
  size_t population;
  size_t max_evals;
  uint64_t seed;
} CbdrSearchOptions;

typedef struct CbdrEstimate {
  double value;
  /**
   * Per-observation variance; the estimator variance is `sigma_hat / n`.
   */
  double sigma_hat;
  double ci_low;
  double ci_high;
  size_t n;
  /**
   * 1 when every inner optimizer met its tolerance.
   */
  int32_t converged;
} CbdrEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *cbdr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cbdr_version(void);

int32_t cbdr_estimate_options_default(struct CbdrEstimateOptions *out);

int32_t cbdr_search_options_default(struct CbdrSearchOptions *out);

/**
 * Builds a dataset from row-major arrays: `x` is `n × p`, `w` is `n × q`
 * with NaN marking unobserved entries (pass null and `q = 0` when there
 * are no predictive covariates). Treatment must be coded ±1.
 */
int32_t cbdr_dataset_new(const double *x,
                         size_t n,
                         size_t p,
                         const double *a,
                         const double *y,
                         const double *w,
                         size_t q,
                         struct CbdrDataset **out);

/**
 * Reads a CSV file; empty or `NA` cells are allowed in predictive columns.
 */
int32_t cbdr_dataset_load_csv(const char *path,
                              const char *treatment,
                              const char *outcome,
                              const char *const *confounders,
                              size_t p,
                              const char *const *predictive,
                              size_t q,
                              struct CbdrDataset **out);

void cbdr_dataset_free(struct CbdrDataset *ds);

/**
 * Writes the row count, confounder count and predictive count.
 */
int32_t cbdr_dataset_shape(const struct CbdrDataset *ds, size_t *n, size_t *p, size_t *q);

/**
 * Rule `d(x) = sign(η₀ + Σ η_j x_j)` from `len = p + 1` coefficients,
 * stored normalized.
 */
int32_t cbdr_rule_new(const double *eta, size_t len, struct CbdrRule **out);

void cbdr_rule_free(struct CbdrRule *rule);

/**
 * Copies the unit-norm coefficients into `out` (capacity `len`); `len`
 * must equal `p + 1`.
 */
int32_t cbdr_rule_eta(const struct CbdrRule *rule, double *out, size_t len);

/**
 * Writes `±1` assignments for every row of `ds` into `out` (capacity `n`).
 */
int32_t cbdr_rule_assign(const struct CbdrRule *rule,
                         const struct CbdrDataset *ds,
                         double *out,
                         size_t n);

/**
 * Value of `rule` on `ds` under `estimator`, with its variance.
 * `options` may be null for defaults.
 */
int32_t cbdr_estimate(const struct CbdrDataset *ds,
                      const struct CbdrRule *rule,
                      int32_t estimator_code,
                      int32_t design_code,
                      const struct CbdrEstimateOptions *options,
                      struct CbdrEstimate *out);

/**
 * Searches a rule maximizing the training value of `estimator` on `ds`.
 * On success `*out` owns a new rule and `*value` holds its training value.
 * Null `options` or `search` select defaults.
 */
int32_t cbdr_optimize_rule(const struct CbdrDataset *ds,
                           int32_t estimator_code,
                           int32_t design_code,
                           const struct CbdrEstimateOptions *options,
                           const struct CbdrSearchOptions *search,
                           struct CbdrRule **out,
                           double *value);

/**
 * Monte Carlo value of the optimal rule in the synthetic benchmark.
 */
int32_t cbdr_oracle_truth(int32_t truth_code,
                          size_t mc_n,
                          uint64_t seed,
                          double *value,
                          double *se);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CBDR_H */
