#ifndef FSTOCH_H
#define FSTOCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. `Ok` is zero.
 */
typedef enum FstochStatus {
  FstochStatus_Ok = 0,
  FstochStatus_NullPointer = 1,
  FstochStatus_InvalidInput = 2,
  /**
   * Quadrature, root finding or a degenerate covariance.
   */
  FstochStatus_Numerical = 3,
  /**
   * A passage or sliding boundary was not reached.
   */
  FstochStatus_NoPassage = 4,
  FstochStatus_BufferTooSmall = 5,
  FstochStatus_Panic = 6,
} FstochStatus;

/**
 * Values of the `phase` argument of [`fstoch_sample_passages`].
 */
typedef enum FstochPhase {
  /**
   * From `x_Γ^E` to the manifold.
   */
  FstochPhase_Regular = 0,
  /**
   * From `x_Γ^M` to `x₂ = δ⁻`.
   */
  FstochPhase_Sliding = 1,
  /**
   * From `x_Γ^S` to `x₂ = δ⁺`.
   */
  FstochPhase_Escape = 2,
} FstochPhase;

/**
 * Relay model with its deterministic anchors; opaque to C.
 */
typedef struct FstochModel FstochModel;

/**
 * Deterministic anchors in transformed coordinates.
 */
typedef struct FstochAnchors {
  double z;
  double t_s;
  double t_e;
  double t_r;
  double t_osc;
  double x_m[3];
  double x_s[3];
  double x_e[3];
  double x_r[3];
} FstochAnchors;

/**
 * Oscillation-time prediction with the nine chained terms of each sum.
 */
typedef struct FstochPrediction {
  double diff_half;
  double diff_osc;
  double var_half;
  double var_osc;
  double std_half;
  double std_osc;
  double varrho;
  double diff_terms[9];
  double var_terms[9];
} FstochPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fstoch_version(void);

/**
 * Copies the last error of this thread into `buf` (NUL-terminated, truncated to `len`).
 * Returns the full message length, 0 when there is none.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fstoch_last_error(char *buf, size_t len);

/**
 * Builds the relay model. `noise` is `"B"`, `"e1"` or `"matrix:<9 values>"`; null means `"B"`.
 *
 * # Safety
 * `noise` must be null or a valid NUL-terminated string; `out` must be a valid pointer.
 */
enum FstochStatus fstoch_model_new(double zeta,
                                   double lambda,
                                   double omega,
                                   double delta_minus,
                                   double delta_plus,
                                   const char *noise,
                                   struct FstochModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`fstoch_model_new`] not yet freed.
 */
void fstoch_model_free(struct FstochModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum FstochStatus fstoch_model_anchors(const struct FstochModel *model, struct FstochAnchors *out);

/**
 * Escape density `p^E(u, s)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FstochStatus fstoch_escape_pdf(double u, double s, double *out);

/**
 * `n` Monte-Carlo passages of one phase, `phase` an [`FstochPhase`] value. `times` receives `n` values and `locations`
 * `3n` values, row `k` at `3k`.
 *
 * # Safety
 * `model` must be a live handle; `times` and `locations` must hold `n` and `3n` doubles.
 */
enum FstochStatus fstoch_sample_passages(const struct FstochModel *model,
                                         uint32_t phase,
                                         double eps,
                                         double dt,
                                         uint64_t seed,
                                         size_t n,
                                         double *times,
                                         double *locations);

/**
 * Oscillation and half-oscillation times along one path from `x_Γ^M`. Writes up to
 * `capacity` values into each buffer and the counts into `n_osc_out`, `n_half_out`.
 *
 * # Safety
 * `model` must be a live handle; `osc`, `half` must hold `capacity` doubles; the count
 * pointers must be valid.
 */
enum FstochStatus fstoch_oscillation_times(const struct FstochModel *model,
                                           double eps,
                                           double dt,
                                           uint64_t seed,
                                           size_t n_osc,
                                           double *osc,
                                           double *half,
                                           size_t capacity,
                                           size_t *n_osc_out,
                                           size_t *n_half_out);

/**
 * Three-term oscillation prediction at `eps`; the escape surrogate uses
 * `escape_samples` Monte-Carlo passages at `dt = 1e-5` with `seed`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum FstochStatus fstoch_predict(const struct FstochModel *model,
                                 double eps,
                                 size_t escape_samples,
                                 uint64_t seed,
                                 struct FstochPrediction *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSTOCH_H */
