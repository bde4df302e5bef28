#ifndef DVPP_H
#define DVPP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DVPP_OK = 0,
  DVPP_ERR_NULL = 1,
  DVPP_ERR_CONFIG = 2,
  DVPP_ERR_SIMULATION = 3,
  DVPP_ERR_NOT_RUN = 4,
  DVPP_ERR_NOT_FOUND = 5,
  DVPP_ERR_BUFFER_TOO_SMALL = 6,
  DVPP_ERR_IO = 7,
  DVPP_ERR_AUDIT_FAILED = 8,
  DVPP_ERR_PANIC = 9,
} DvppStatus;

/**
 * Opaque simulation handle.
 */
typedef struct DvppSim DvppSim;

/**
 * Post-event metrics. `damping_ratio` is NaN when no oscillation is
 * visible.
 */
typedef struct {
  double nadir_hz;
  double nadir_time_s;
  double max_rocof_hz_per_s;
  double coherence_hz;
  double steady_state_dev_hz;
  double recovery_time_s;
  double damping_ratio;
} DvppMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library on the same thread.
 */
const char *dvpp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dvpp_version(void);

/**
 * Built-in experiment 1, 2 or 3. NULL on failure.
 */
DvppSim *dvpp_sim_from_experiment(uint32_t n);

/**
 * Scenario from a JSON document. NULL on failure.
 *
 * `json` must be NULL or a valid NUL-terminated string.
 */
DvppSim *dvpp_sim_from_json(const char *json);

/**
 * Releases a handle. NULL is ignored.
 *
 * `sim` must be NULL or a handle from this library not yet freed.
 */
void dvpp_sim_free(DvppSim *sim);

/**
 * Sets step size and horizon, seconds. Discards any previous output.
 *
 * `sim` must be NULL or a live handle.
 */
DvppStatus dvpp_sim_set_solver(DvppSim *sim, double dt, double t_end);

/**
 * Replaces the event list with a single load step. Discards any previous
 * output.
 *
 * `sim` must be NULL or a live handle.
 */
DvppStatus dvpp_sim_set_load_step(DvppSim *sim, size_t bus, double dp, double dq, double t);

/**
 * Removes all events. Discards any previous output.
 *
 * `sim` must be NULL or a live handle.
 */
DvppStatus dvpp_sim_clear_events(DvppSim *sim);

/**
 * Runs the scenario to its horizon.
 *
 * `sim` must be NULL or a live handle.
 */
DvppStatus dvpp_sim_run(DvppSim *sim);

/**
 * Number of time samples, written to `*n`.
 *
 * `sim` must be NULL or a live handle; `n` must be NULL or writable.
 */
DvppStatus dvpp_sim_sample_count(const DvppSim *sim, size_t *n);

/**
 * Copies one timeseries column (`"t"` or `"{id}.f_hz"`, `"{id}.dp_pu"`,
 * `"{id}.dq_pu"`, `"{id}.v_pu"`) into `buf`, which must hold `len` values.
 *
 * `sim` must be NULL or a live handle; `column` a NUL-terminated string;
 * `buf` valid for `len` writes.
 */
DvppStatus dvpp_sim_copy_column(const DvppSim *sim, const char *column, double *buf, size_t len);

/**
 * Metrics for a disturbance at `t_event` seconds.
 *
 * `sim` must be NULL or a live handle; `out` NULL or writable.
 */
DvppStatus dvpp_sim_metrics(const DvppSim *sim, double t_event, DvppMetrics *out);

/**
 * Writes the timeseries CSV to `path`.
 *
 * `sim` must be NULL or a live handle; `path` a NUL-terminated string.
 */
DvppStatus dvpp_sim_write_csv(const DvppSim *sim, const char *path);

/**
 * Allocates a DVPP spec (built-in name or JSON document) and writes the
 * largest sum-to-one residual to `*max_residual`. Returns
 * `DVPP_ERR_AUDIT_FAILED` when the residual exceeds the audit tolerance.
 *
 * `spec` must be a NUL-terminated string; `max_residual` NULL or writable.
 */
DvppStatus dvpp_audit(const char *spec, double *max_residual);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DVPP_H */
