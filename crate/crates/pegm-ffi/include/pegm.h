#ifndef PEGM_H
#define PEGM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function.
 */
typedef enum PegmStatus {
  /**
   * Success.
   */
  PEGM_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PEGM_STATUS_NULL_ARGUMENT = 1,
  /**
   * Arguments broke an API contract (shapes, ranges, asymmetry).
   */
  PEGM_STATUS_CONTRACT = 2,
  /**
   * Parameter outside the family's feasible set.
   */
  PEGM_STATUS_INFEASIBLE = 3,
  /**
   * Value outside a mathematical domain.
   */
  PEGM_STATUS_DOMAIN = 4,
  /**
   * Importance weights degenerated; increase the sample size.
   */
  PEGM_STATUS_DEGENERACY = 5,
  /**
   * A resource guard or sampling budget was exceeded.
   */
  PEGM_STATUS_RESOURCE = 6,
  /**
   * File or serialization failure.
   */
  PEGM_STATUS_IO = 7,
  /**
   * A fit diverged or has no finite optimum.
   */
  PEGM_STATUS_DIVERGED = 8,
  /**
   * Internal panic was caught; state is consistent but the call failed.
   */
  PEGM_STATUS_PANIC = 9,
  /**
   * Any other failure; see pegm_last_error.
   */
  PEGM_STATUS_OTHER = 10,
} PegmStatus;

/**
 * Model family selector accepted by the `family` parameters.
 */
typedef enum PegmFamily {
  /**
   * Binary nodes in {0,1}.
   */
  PEGM_FAMILY_ISING = 0,
  /**
   * Count nodes; interactions must be nonpositive.
   */
  PEGM_FAMILY_POISSON = 1,
  /**
   * Real nodes; the parameter must be positive definite.
   */
  PEGM_FAMILY_GAUSSIAN = 2,
} PegmFamily;

/**
 * Opaque observation matrix.
 */
typedef struct PegmData PegmData;

/**
 * Opaque symmetric parameter matrix.
 */
typedef struct PegmTheta PegmTheta;

/**
 * Options for pegm_fit; obtain defaults from pegm_fit_options_default.
 */
typedef struct PegmFitOptions {
  /**
   * Initial step size.
   */
  double gamma0;
  /**
   * Robbins-Monro decay horizon in iterations.
   */
  double t0;
  size_t max_iters;
  /**
   * Relative step norm that counts as converged.
   */
  double tol;
  /**
   * Monte Carlo batch size per iteration; 0 picks a size from p.
   */
  size_t mc_n;
  uint64_t seed;
  /**
   * L1 penalty; 0 disables it.
   */
  double lambda;
  /**
   * 1 to penalize diagonal entries as well.
   */
  int penalize_diagonal;
} PegmFitOptions;

/**
 * Fit summary filled by pegm_fit.
 */
typedef struct PegmFitInfo {
  size_t iterations;
  /**
   * 1 when the step-size criterion was met within max_iters.
   */
  int converged;
  /**
   * Effective sample size of the final diagnostic batch.
   */
  double ess;
  /**
   * Normalizer ratio estimate at the solution.
   */
  double z_ratio;
} PegmFitInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's most recent error message into `buf` as a
 * NUL-terminated string, truncating to `cap` bytes. Returns the full
 * message length in bytes excluding the NUL, so `ret >= cap` means the
 * message was truncated. A zero `cap` or null `buf` only measures.
 */
size_t pegm_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string; never freed.
 */
const char *pegm_version(void);

/**
 * Creates a p x p symmetric parameter from a dense row-major buffer of
 * p*p doubles. The buffer must be exactly symmetric.
 *
 * # Safety
 * `values` must point to `p * p` readable doubles and `out` to a writable
 * pointer slot. On success `*out` owns the handle; release it with
 * `pegm_theta_free`.
 */
enum PegmStatus pegm_theta_new(size_t p, const double *values, struct PegmTheta **out);

/**
 * Creates an all-zero p x p parameter.
 *
 * # Safety
 * `out` must point to a writable pointer slot. On success `*out` owns the
 * handle; release it with `pegm_theta_free`.
 */
enum PegmStatus pegm_theta_zeros(size_t p, struct PegmTheta **out);

/**
 * Node count of a parameter handle; 0 if the handle is null.
 *
 * # Safety
 * `theta` must be null or a live handle from this library.
 */
size_t pegm_theta_dim(const struct PegmTheta *theta);

/**
 * Sets entry (j, k) and its mirror (k, j).
 *
 * # Safety
 * `theta` must be a live handle from this library.
 */
enum PegmStatus pegm_theta_set(struct PegmTheta *theta, size_t j, size_t k, double value);

/**
 * Reads entry (j, k).
 *
 * # Safety
 * `theta` must be a live handle and `out` a writable double.
 */
enum PegmStatus pegm_theta_get(const struct PegmTheta *theta, size_t j, size_t k, double *out);

/**
 * Copies the full matrix into a caller buffer of p*p doubles, row-major.
 *
 * # Safety
 * `theta` must be a live handle and `out` must point to `p * p` writable
 * doubles, with p from `pegm_theta_dim`.
 */
enum PegmStatus pegm_theta_copy(const struct PegmTheta *theta, double *out);

/**
 * Releases a parameter handle; a null pointer is ignored.
 *
 * # Safety
 * `theta` must be null or a handle not freed before; it is dead afterwards.
 */
void pegm_theta_free(struct PegmTheta *theta);

/**
 * Creates an n x p observation matrix from a dense row-major buffer,
 * validating every cell against the family's support.
 *
 * # Safety
 * `rows` must point to `n * p` readable doubles and `out` to a writable
 * pointer slot. On success `*out` owns the handle; release it with
 * `pegm_data_free`.
 */
enum PegmStatus pegm_data_new(int family,
                              size_t n,
                              size_t p,
                              const double *rows,
                              struct PegmData **out);

/**
 * Row count of a data handle; 0 if the handle is null.
 *
 * # Safety
 * `data` must be null or a live handle from this library.
 */
size_t pegm_data_rows(const struct PegmData *data);

/**
 * Column count of a data handle; 0 if the handle is null.
 *
 * # Safety
 * `data` must be null or a live handle from this library.
 */
size_t pegm_data_cols(const struct PegmData *data);

/**
 * Copies the observations into a caller buffer of n*p doubles, row-major.
 *
 * # Safety
 * `data` must be a live handle and `out` must point to `n * p` writable
 * doubles, with n and p from `pegm_data_rows` / `pegm_data_cols`.
 */
enum PegmStatus pegm_data_copy(const struct PegmData *data, double *out);

/**
 * Releases a data handle; a null pointer is ignored.
 *
 * # Safety
 * `data` must be null or a handle not freed before; it is dead afterwards.
 */
void pegm_data_free(struct PegmData *data);

/**
 * Draws n rows from the model with a Gibbs chain (systematic sweeps,
 * `burn_in` discarded sweeps, every `thin`-th sweep kept). Deterministic
 * for a fixed seed.
 *
 * # Safety
 * `theta` must be a live handle and `out` a writable pointer slot. On
 * success `*out` owns the handle; release it with `pegm_data_free`.
 */
enum PegmStatus pegm_gibbs_sample(int family,
                                  const struct PegmTheta *theta,
                                  size_t n,
                                  size_t burn_in,
                                  size_t thin,
                                  uint64_t seed,
                                  struct PegmData **out);

/**
 * Estimates the normalizer ratio z(theta)/z(diag theta) and, when
 * `grad_log_z` is non-null, the gradient of log z as a p*p row-major
 * matrix, from `n` importance draws. `ess` reports the effective sample
 * size of the weights; `log_z_hat` the absolute log-normalizer estimate.
 * Any of the scalar out pointers may be null to skip that output.
 *
 * # Safety
 * `theta` must be a live handle; non-null out pointers must be writable
 * (`grad_log_z` with room for p*p doubles).
 */
enum PegmStatus pegm_estimate(int family,
                              const struct PegmTheta *theta,
                              size_t n,
                              uint64_t seed,
                              double *z_ratio,
                              double *log_z_hat,
                              double *ess,
                              double *grad_log_z);

/**
 * Fills `out` with the default fit options.
 *
 * # Safety
 * `out` must point to a writable PegmFitOptions.
 */
enum PegmStatus pegm_fit_options_default(struct PegmFitOptions *out);

/**
 * Maximum likelihood fit (L1-penalized when options.lambda > 0) by
 * stochastic proximal gradient ascent. On success `*theta_out` holds the
 * estimate and `info`, when non-null, the run summary.
 *
 * # Safety
 * `data` must be a live handle, `options` readable, `theta_out` a writable
 * pointer slot, and `info` null or writable. On success `*theta_out` owns
 * the handle; release it with `pegm_theta_free`.
 */
enum PegmStatus pegm_fit(int family,
                         const struct PegmData *data,
                         const struct PegmFitOptions *options,
                         struct PegmTheta **theta_out,
                         struct PegmFitInfo *info);

/**
 * Node-wise pseudo-likelihood fit with an optional L1 penalty
 * (lambda = 0 for the plain fit). Discrete families only.
 *
 * # Safety
 * `data` must be a live handle and `theta_out` a writable pointer slot. On
 * success `*theta_out` owns the handle; release it with `pegm_theta_free`.
 */
enum PegmStatus pegm_mple_fit(int family,
                              const struct PegmData *data,
                              double lambda,
                              struct PegmTheta **theta_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PEGM_H */
