/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef QUAKECTL_H
#define QUAKECTL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum QkStatus {
  QK_STATUS_OK = 0,
  QK_STATUS_NULL_POINTER = 1,
  QK_STATUS_INVALID_UTF8 = 2,
  /**
   * Configuration or gain validation failed.
   */
  QK_STATUS_CONFIG = 3,
  /**
   * The integrator stopped early; a partial trajectory may still be returned.
   */
  QK_STATUS_INTEGRATION = 4,
  QK_STATUS_IO = 5,
  /**
   * Invalid model data: dimensions, definiteness or rank.
   */
  QK_STATUS_MODEL = 6,
  QK_STATUS_OUT_OF_RANGE = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  QK_STATUS_INTERNAL = 8,
} QkStatus;

/**
 * Validated run configuration.
 */
typedef struct QkConfig QkConfig;

/**
 * Sampled trajectory of a finished (or aborted) run.
 */
typedef struct QkTrajectory QkTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t qk_last_error(char *buf, size_t len);

/**
 * Static, NUL-terminated name of a status code.
 */
const char *qk_status_name(enum QkStatus status);

/**
 * Reads and validates a configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum QkStatus qk_config_load(const char *path, struct QkConfig **out);

/**
 * Parses and validates configuration text. Relative CSV paths resolve
 * against `base_dir`, which may be null.
 *
 * # Safety
 * `text` must be a NUL-terminated string, `base_dir` null or one, and
 * `out` a valid pointer.
 */
enum QkStatus qk_config_parse(const char *text, const char *base_dir, struct QkConfig **out);

/**
 * # Safety
 * `config` must be null or a handle from `qk_config_load`/`qk_config_parse`
 * that has not been freed.
 */
void qk_config_free(struct QkConfig *config);

/**
 * Number of fault elements `n` and wells `q`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum QkStatus qk_config_dims(const struct QkConfig *config, size_t *n, size_t *q);

/**
 * Runs the configuration. On `QkStatus::Integration` the trajectory up to
 * the failure is still returned in `out` when available.
 *
 * # Safety
 * `config` must be a live handle and `out` a valid pointer.
 */
enum QkStatus qk_run(const struct QkConfig *config, struct QkTrajectory **out);

/**
 * Runs the configuration and writes the CLI output files into `out_dir`.
 * `exit_code` receives the command-line exit code (0, 3 or 4).
 *
 * # Safety
 * `config` must be a live handle, `out_dir` a NUL-terminated string and
 * `exit_code` a valid pointer.
 */
enum QkStatus qk_run_export(const struct QkConfig *config, const char *out_dir, int32_t *exit_code);

/**
 * # Safety
 * `traj` must be null or a handle from `qk_run` that has not been freed.
 */
void qk_trajectory_free(struct QkTrajectory *traj);

/**
 * Number of recorded samples; 0 for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t qk_trajectory_len(const struct QkTrajectory *traj);

/**
 * Number of recorded mode switches (plant and observer copy).
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t qk_trajectory_event_count(const struct QkTrajectory *traj);

/**
 * Summary figures of a trajectory. Any output pointer may be null.
 *
 * # Safety
 * `traj` must be a live handle; non-null outputs must be valid.
 */
enum QkStatus qk_trajectory_summary(const struct QkTrajectory *traj,
                                    double *t_final,
                                    double *final_mean_slip,
                                    double *peak_slip_rate,
                                    bool *monitor_passed);

/**
 * Copies sample `index`: its time into `t` and the slip, displacement and
 * slip-rate vectors (`n` values each, any may be null) into the buffers.
 *
 * # Safety
 * `traj` and `t` must be valid; non-null buffers must hold `n` doubles.
 */
enum QkStatus qk_trajectory_sample(const struct QkTrajectory *traj,
                                   size_t index,
                                   size_t n,
                                   double *t,
                                   double *x1,
                                   double *x2,
                                   double *x3);

/**
 * Gain condition `lambda_delta > (l_delta + 1)/mu_min`, `lambda_v > l_v/mu_min`.
 * Writes both thresholds (outputs may be null) and `passed`.
 *
 * # Safety
 * Non-null pointers must be valid.
 */
enum QkStatus qk_validate_gains(double lambda_delta,
                                double lambda_v,
                                double mu_min,
                                double l_delta,
                                double l_v,
                                double *delta_threshold,
                                double *v_threshold,
                                bool *passed);

/**
 * Quintic slip reference and its rate at time `t`.
 *
 * # Safety
 * `r` and `r_dot` must be valid pointers.
 */
enum QkStatus qk_reference(double d_max, double t_op, double t, double *r, double *r_dot);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUAKECTL_H */
