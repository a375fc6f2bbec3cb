#ifndef TRANSFER_BANDIT_H
#define TRANSFER_BANDIT_H

/* Generated by cbindgen from transfer-bandit-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every API call.
 */
typedef enum TbStatus {
  TB_STATUS_OK = 0,
  /**
   * A pointer or index argument was null or out of range.
   */
  TB_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The configuration file is missing or malformed.
   */
  TB_STATUS_CONFIG_ERROR = 2,
  /**
   * A factorization or solve failed.
   */
  TB_STATUS_NUMERICAL_ERROR = 3,
  /**
   * A run aborted mid-simulation or an invariant was violated.
   */
  TB_STATUS_RUNTIME_ERROR = 4,
  /**
   * A panic was caught at the boundary.
   */
  TB_STATUS_PANIC = 5,
} TbStatus;

/**
 * An experiment handle: a validated configuration plus, after
 * [`tb_experiment_run`], the aggregated result curves.
 */
typedef struct TbExperiment TbExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tb_version(void);

/**
 * Copies the last error message on this thread into `buf` (truncated to
 * `len - 1` bytes, always NUL-terminated) and returns the full message
 * length in bytes.
 *
 * # Safety
 * `buf` must point to `len` writable bytes, or be null (then only the
 * length is returned).
 */
uintptr_t tb_last_error_message(char *buf, uintptr_t len);

/**
 * Parses and validates a config file. On success `*out` owns a new handle
 * that must be released with [`tb_experiment_free`]. `expand_sweep`
 * instantiates the `[sweep]` scenarios; otherwise only the base scenario is
 * kept.
 *
 * # Safety
 * `config_path` must be a NUL-terminated path and `out` a valid pointer.
 */
enum TbStatus tb_experiment_load(const char *config_path,
                                 bool expand_sweep,
                                 struct TbExperiment **out);

/**
 * Overrides the base seed.
 *
 * # Safety
 * `handle` must come from [`tb_experiment_load`] and not be freed.
 */
enum TbStatus tb_experiment_set_seed(struct TbExperiment *handle, uint64_t seed);

/**
 * Overrides the number of runs per (scenario, policy).
 *
 * # Safety
 * As for [`tb_experiment_set_seed`].
 */
enum TbStatus tb_experiment_set_runs(struct TbExperiment *handle, uintptr_t runs);

/**
 * Caps worker threads.
 *
 * # Safety
 * As for [`tb_experiment_set_seed`].
 */
enum TbStatus tb_experiment_set_threads(struct TbExperiment *handle, uintptr_t threads);

/**
 * Redirects all output files.
 *
 * # Safety
 * `handle` as above; `out_dir` must be NUL-terminated.
 */
enum TbStatus tb_experiment_set_out_dir(struct TbExperiment *handle, const char *out_dir);

/**
 * Enables or disables the SVG plot.
 *
 * # Safety
 * As for [`tb_experiment_set_seed`].
 */
enum TbStatus tb_experiment_set_svg(struct TbExperiment *handle, bool svg);

/**
 * Runs the full experiment grid and writes the output files. Returns
 * `RuntimeError` if any run failed its invariants (the remaining runs still
 * complete and are written).
 *
 * # Safety
 * As for [`tb_experiment_set_seed`].
 */
enum TbStatus tb_experiment_run(struct TbExperiment *handle);

/**
 * Number of aggregated (scenario, policy) curves after a successful run;
 * 0 before [`tb_experiment_run`].
 *
 * # Safety
 * As for [`tb_experiment_set_seed`].
 */
uintptr_t tb_experiment_curve_count(struct TbExperiment *handle);

/**
 * Copies the `"scenario/policy"` label of curve `index` into `buf`
 * (truncated, NUL-terminated) and returns the full label length, or 0 if the
 * index is out of range.
 *
 * # Safety
 * `handle` as above; `buf` must point to `len` writable bytes or be null.
 */
uintptr_t tb_experiment_curve_name(struct TbExperiment *handle,
                                   uintptr_t index,
                                   char *buf,
                                   uintptr_t len);

/**
 * Writes the mean final cumulative regret of curve `index` into `out`.
 *
 * # Safety
 * `handle` as above; `out` must be a valid pointer.
 */
enum TbStatus tb_experiment_final_regret(struct TbExperiment *handle, uintptr_t index, double *out);

/**
 * Releases a handle. Passing null is a no-op.
 *
 * # Safety
 * `handle` must come from [`tb_experiment_load`] and not be freed twice.
 */
void tb_experiment_free(struct TbExperiment *handle);

/**
 * Runs the reduced-scale verification suite (the CLI's `selftest`).
 */
enum TbStatus tb_selftest(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRANSFER_BANDIT_H */
