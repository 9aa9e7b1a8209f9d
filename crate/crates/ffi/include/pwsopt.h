/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef PWSOPT_H
#define PWSOPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PwsStatus {
  PWS_STATUS_OK = 0,
  PWS_STATUS_NULL_POINTER = 1,
  PWS_STATUS_INVALID_ARGUMENT = 2,
  PWS_STATUS_DIMENSION_MISMATCH = 3,
  PWS_STATUS_UNKNOWN_SYSTEM = 4,
  PWS_STATUS_TRANSVERSALITY_VIOLATION = 5,
  PWS_STATUS_ZENO_SUSPECTED = 6,
  PWS_STATUS_NUMERICAL_ERROR = 7,
  PWS_STATUS_DEGENERATE_GUARD = 8,
  PWS_STATUS_BUFFER_TOO_SMALL = 9,
  PWS_STATUS_PANIC = 10,
  PWS_STATUS_OTHER = 11,
} PwsStatus;

typedef enum PwsScheme {
  PWS_SCHEME_EULER = 0,
  PWS_SCHEME_RK4 = 1,
} PwsScheme;

/**
 * A built-in piecewise-smooth system.
 */
typedef struct PwsSystem PwsSystem;

/**
 * A sampled trajectory.
 */
typedef struct PwsTrajectory PwsTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Text for the most recent failure on this thread, or null. The pointer is
 * valid until the next `pws_*` call on the same thread.
 */
const char *pws_last_error_message(void);

/**
 * Static name of a status code.
 */
const char *pws_status_name(enum PwsStatus status);

/**
 * Looks up a built-in system (`sliding1d`, `crossing1d`, `grazing2d`, `hopper`, ...).
 *
 * # Safety
 * `name` must be a nul-terminated string and `out` a valid pointer.
 */
enum PwsStatus pws_system_new(const char *name, struct PwsSystem **out);

/**
 * # Safety
 * `sys` must come from `pws_system_new` and not be used afterwards.
 */
void pws_system_free(struct PwsSystem *sys);

/**
 * State dimension, or 0 for a null handle.
 *
 * # Safety
 * `sys` must be null or a live handle.
 */
size_t pws_system_state_dim(const struct PwsSystem *sys);

/**
 * Input dimension, or 0 for a null handle.
 *
 * # Safety
 * `sys` must be null or a live handle.
 */
size_t pws_system_input_dim(const struct PwsSystem *sys);

/**
 * Filippov solution over `[0, horizon]` with `intervals` equal input
 * intervals; `inputs` holds `intervals * input_dim` values. A nonpositive
 * `max_step` selects the default.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be writable.
 */
enum PwsStatus pws_simulate_filippov(const struct PwsSystem *sys,
                                     const double *x0,
                                     const double *inputs,
                                     size_t intervals,
                                     double horizon,
                                     double max_step,
                                     struct PwsTrajectory **out);

/**
 * Relaxed trajectory at band width `epsilon` on the grid of `intervals + 1`
 * points over `[0, horizon]`.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out` must be writable.
 */
enum PwsStatus pws_simulate_smooth(const struct PwsSystem *sys,
                                   const double *x0,
                                   const double *inputs,
                                   size_t intervals,
                                   double horizon,
                                   double epsilon,
                                   enum PwsScheme scheme,
                                   struct PwsTrajectory **out);

/**
 * # Safety
 * `traj` must come from a `pws_simulate_*` call and not be used afterwards.
 */
void pws_trajectory_free(struct PwsTrajectory *traj);

/**
 * Number of samples, or 0 for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t pws_trajectory_len(const struct PwsTrajectory *traj);

/**
 * Number of surface events (arrivals, exits, crossings).
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t pws_trajectory_event_count(const struct PwsTrajectory *traj);

/**
 * Copies the sample times into `buf` (`len >= pws_trajectory_len`).
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
enum PwsStatus pws_trajectory_times(const struct PwsTrajectory *traj, double *buf, size_t len);

/**
 * Copies the states row by row into `buf` (`len >= samples * state_dim`).
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
enum PwsStatus pws_trajectory_states(const struct PwsTrajectory *traj, double *buf, size_t len);

/**
 * Value and exact gradient of the relaxed cost `weights . x(T)` at band
 * width `epsilon`, on the grid of `intervals + 1` points. `grad_x0` receives
 * `state_dim` values and `grad_u` `intervals * input_dim` values.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum PwsStatus pws_adjoint_gradient(const struct PwsSystem *sys,
                                    const double *x0,
                                    const double *inputs,
                                    size_t intervals,
                                    double horizon,
                                    double epsilon,
                                    enum PwsScheme scheme,
                                    const double *weights,
                                    double *value,
                                    double *grad_x0,
                                    double *grad_u);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PWSOPT_H */
