#ifndef RDSPDE_H
#define RDSPDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum RdsStatus {
  RDS_STATUS_OK = 0,
  RDS_STATUS_NULL_POINTER = 1,
  RDS_STATUS_INVALID_ARGUMENT = 2,
  RDS_STATUS_HYPOTHESIS_VIOLATION = 3,
  RDS_STATUS_BLOW_UP = 4,
  RDS_STATUS_INTERNAL = 5,
} RdsStatus;

/**
 * Built-in coefficient sets.
 */
typedef enum RdsPreset {
  /**
   * `f = ρ - ρ³`, `g = 1 + 0.1 sin ρ`.
   */
  RDS_PRESET_CUBIC_DEFAULT = 0,
  /**
   * `f = -aρ`, `g ≡ σ`.
   */
  RDS_PRESET_OU_LINEAR = 1,
} RdsPreset;

/**
 * Profiles `χ` of the cylindrical observable `χ(⟨x, e_k⟩)`.
 */
typedef enum RdsChi {
  RDS_CHI_IDENTITY = 0,
  RDS_CHI_TANH = 1,
  RDS_CHI_SIN = 2,
  RDS_CHI_COS = 3,
  RDS_CHI_ATAN = 4,
} RdsChi;

/**
 * Opaque model handle.
 */
typedef struct RdsModel RdsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a model on `grid` interior points driven by `noise_modes` modes.
 * `ou_a` and `ou_sigma` are read by the linear preset only. The hypotheses
 * are validated; a violation returns `HYPOTHESIS_VIOLATION` and no handle.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum RdsStatus rds_model_new(enum RdsPreset preset,
                             size_t grid,
                             size_t noise_modes,
                             double ou_a,
                             double ou_sigma,
                             struct RdsModel **out);

/**
 * Releases a handle from [`rds_model_new`]; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void rds_model_free(struct RdsModel *model);

/**
 * Number of interior grid points of `model`, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t rds_model_grid(const struct RdsModel *model);

/**
 * Integrates one trajectory (id `trajectory` of stream `seed`) to `horizon`
 * and writes the final grid values into `out_u[0..n]`.
 *
 * # Safety
 * `x0` is null or points to `n` doubles; `out_u` points to `n` writable doubles.
 */
enum RdsStatus rds_simulate(const struct RdsModel *model,
                            const double *x0,
                            size_t n,
                            double dt,
                            double horizon,
                            uint64_t seed,
                            uint64_t trajectory,
                            double *out_u);

/**
 * Monte Carlo `P_tφ(x0)` for `φ(x) = χ(⟨x, e_mode⟩)`.
 *
 * # Safety
 * `x0` is null or points to `n` doubles; `mean` and `std_error` are writable.
 */
enum RdsStatus rds_estimate_pt_mode(const struct RdsModel *model,
                                    const double *x0,
                                    size_t n,
                                    enum RdsChi chi,
                                    size_t mode,
                                    double t,
                                    double dt,
                                    size_t paths,
                                    uint64_t seed,
                                    double *mean,
                                    double *std_error);

/**
 * Bismut–Elworthy–Li estimate of `⟨e_h_mode, D P_tφ(x0)⟩_E` for
 * `φ(x) = χ(⟨x, e_mode⟩)`. Needs invertible noise (`noise_modes = grid`).
 *
 * # Safety
 * `x0` is null or points to `n` doubles; `mean` and `std_error` are writable.
 */
enum RdsStatus rds_gradient_bel_mode(const struct RdsModel *model,
                                     const double *x0,
                                     size_t n,
                                     enum RdsChi chi,
                                     size_t mode,
                                     size_t h_mode,
                                     double t,
                                     double dt,
                                     size_t paths,
                                     uint64_t seed,
                                     double *mean,
                                     double *std_error);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *rds_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rds_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RDSPDE_H */
