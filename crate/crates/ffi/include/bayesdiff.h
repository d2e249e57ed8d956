#ifndef BAYESDIFF_H
#define BAYESDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum BdStatus {
  BD_STATUS_OK = 0,
  BD_STATUS_NULL_POINTER = 1,
  BD_STATUS_INVALID_ARGUMENT = 2,
  BD_STATUS_IO = 3,
  BD_STATUS_FORMAT = 4,
  BD_STATUS_SHAPE_MISMATCH = 5,
  BD_STATUS_NUMERICAL = 6,
  BD_STATUS_PANIC = 7,
} BdStatus;

/**
 * Sampler selector for `bd_run_bayesdiff`. Analytic-DPM is not offered
 * here since it needs a Gamma table estimated from the training data.
 */
typedef enum BdSampler {
  BD_SAMPLER_EULER_SDE = 0,
  BD_SAMPLER_DDPM = 1,
  BD_SAMPLER_DDIM = 2,
  BD_SAMPLER_DPM_SOLVER2 = 3,
} BdSampler;

/**
 * A trained network with its last-layer posterior.
 */
typedef struct BdModel BdModel;

/**
 * A discrete VP noise schedule.
 */
typedef struct BdSchedule BdSchedule;

/**
 * Outputs of one generation, written by `bd_run_bayesdiff`.
 */
typedef struct BdRunStats {
  double image_uncertainty;
  size_t nfe_count;
  size_t clamp_count;
} BdRunStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bd_version(void);

/**
 * Message of the last failed call on this thread, or NULL if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *bd_last_error_message(void);

/**
 * Linear-beta VP schedule with `steps` grid points.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum BdStatus bd_schedule_new_linear(double beta_start,
                                     double beta_end,
                                     size_t steps,
                                     struct BdSchedule **out);

/**
 * The 1000-step linear schedule resampled on `steps` grid points.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum BdStatus bd_schedule_new_linear_rescaled(size_t steps, struct BdSchedule **out);

/**
 * Number of steps `T`, or 0 for a NULL handle.
 *
 * # Safety
 * `schedule` must be NULL or a live handle.
 */
size_t bd_schedule_steps(const struct BdSchedule *schedule);

/**
 * `alpha_bar_t` for `0 <= t <= T`.
 *
 * # Safety
 * `schedule` must be a live handle and `out` writable.
 */
enum BdStatus bd_schedule_alpha_bar(const struct BdSchedule *schedule, size_t t, double *out);

/**
 * # Safety
 * `schedule` must be NULL or a handle not yet freed.
 */
void bd_schedule_free(struct BdSchedule *schedule);

/**
 * Loads a network checkpoint and its posterior, as written by
 * `bayesdiff train`.
 *
 * # Safety
 * Both paths must be NUL-terminated strings and `out` writable.
 */
enum BdStatus bd_model_load(const char *checkpoint_path,
                            const char *posterior_path,
                            struct BdModel **out);

/**
 * Pixels per image.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum BdStatus bd_model_dim(const struct BdModel *model, size_t *out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void bd_model_free(struct BdModel *model);

/**
 * One BayesDiff generation with the closed-form last-layer variance.
 *
 * `skip_interval` 0 runs every step with uncertainty, otherwise every
 * `skip_interval`-th step from `T` down. `x_t` may be NULL to start from
 * the standard-normal latent of `seed`. All arrays hold `dim` values, where
 * `dim` must equal `bd_model_dim`. `out_mean0` and `out_stats` may be
 * NULL.
 *
 * # Safety
 * Handles must be live; non-NULL arrays must hold `dim` doubles.
 */
enum BdStatus bd_run_bayesdiff(const struct BdModel *model,
                               const struct BdSchedule *schedule,
                               enum BdSampler sampler,
                               size_t mc_samples,
                               size_t skip_interval,
                               uint64_t seed,
                               const double *x_t,
                               size_t dim,
                               double *out_x0,
                               double *out_mean0,
                               double *out_var0,
                               struct BdRunStats *out_stats);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BAYESDIFF_H */
