#ifndef FEDSIM_H
#define FEDSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. `CONFIG` and `RUNTIME` match the CLI exit codes.
 */
typedef enum FedsimStatus {
  FEDSIM_STATUS_OK = 0,
  FEDSIM_STATUS_CONFIG = 2,
  FEDSIM_STATUS_RUNTIME = 3,
  FEDSIM_STATUS_NULL_POINTER = 4,
  FEDSIM_STATUS_INVALID_UTF8 = 5,
  FEDSIM_STATUS_PANIC = 6,
  FEDSIM_STATUS_OUT_OF_RANGE = 7,
} FedsimStatus;

/**
 * Parsed and validated experiment configuration.
 */
typedef struct FedsimConfig FedsimConfig;

/**
 * Named parameter tensors.
 */
typedef struct FedsimParams FedsimParams;

/**
 * Outcome of a federated run over all configured seeds.
 */
typedef struct FedsimResult FedsimResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next fedsim call on the same thread.
 */
const char *fedsim_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fedsim_version(void);

/**
 * Loads a JSON experiment config from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FedsimStatus fedsim_config_load(const char *path, struct FedsimConfig **out);

/**
 * Parses a JSON experiment config from a string.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum FedsimStatus fedsim_config_parse(const char *json, struct FedsimConfig **out);

/**
 * Applies a `key=value` override (dotted keys, JSON values). On failure
 * the config is left unchanged.
 *
 * # Safety
 * `config` must come from this library; `assignment` must be NUL-terminated.
 */
enum FedsimStatus fedsim_config_set(struct FedsimConfig *config, const char *assignment);

/**
 * Resolved config as JSON. Free the string with [`fedsim_string_free`].
 *
 * # Safety
 * `config` must come from this library; `out` must be writable.
 */
enum FedsimStatus fedsim_config_to_json(const struct FedsimConfig *config, char **out);

/**
 * # Safety
 * `config` must come from this library or be null.
 */
void fedsim_config_free(struct FedsimConfig *config);

/**
 * # Safety
 * `s` must be a string returned by this library or null.
 */
void fedsim_string_free(char *s);

/**
 * Runs the experiment for every configured seed.
 *
 * # Safety
 * `config` must come from this library; `out` must be writable.
 */
enum FedsimStatus fedsim_run(const struct FedsimConfig *config,
                             bool parallel_seeds,
                             struct FedsimResult **out);

/**
 * Number of seeds in the result.
 *
 * # Safety
 * `result` must come from this library; `out` must be writable.
 */
enum FedsimStatus fedsim_result_num_seeds(const struct FedsimResult *result, size_t *out);

/**
 * Rounds per seed.
 *
 * # Safety
 * `result` must come from this library; `out` must be writable.
 */
enum FedsimStatus fedsim_result_num_rounds(const struct FedsimResult *result, size_t *out);

/**
 * Test accuracy after `round` (1-based) for the seed at `seed_index`.
 *
 * # Safety
 * `result` must come from this library; `out` must be writable.
 */
enum FedsimStatus fedsim_result_accuracy(const struct FedsimResult *result,
                                         size_t seed_index,
                                         size_t round,
                                         double *out);

/**
 * Mean and population standard deviation of the final accuracy over seeds.
 *
 * # Safety
 * `result` must come from this library; both out-pointers must be writable.
 */
enum FedsimStatus fedsim_result_final_accuracy(const struct FedsimResult *result,
                                               double *mean,
                                               double *std);

/**
 * Writes the run artifacts (round CSV, summary, config echo, ...) to `dir`.
 *
 * # Safety
 * `result` must come from this library; `dir` must be NUL-terminated.
 */
enum FedsimStatus fedsim_result_write(const struct FedsimResult *result, const char *dir);

/**
 * Copy of the final global parameters for the seed at `seed_index`.
 *
 * # Safety
 * `result` must come from this library; `out` must be writable.
 */
enum FedsimStatus fedsim_result_params(const struct FedsimResult *result,
                                       size_t seed_index,
                                       struct FedsimParams **out);

/**
 * # Safety
 * `result` must come from this library or be null.
 */
void fedsim_result_free(struct FedsimResult *result);

/**
 * Loads a parameter file written by `fedsim run` or `fedsim baseline`.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum FedsimStatus fedsim_params_load(const char *path, struct FedsimParams **out);

/**
 * Saves parameters (binary plus JSON manifest).
 *
 * # Safety
 * `params` must come from this library; `path` must be NUL-terminated.
 */
enum FedsimStatus fedsim_params_save(const struct FedsimParams *params, const char *path);

/**
 * Number of named tensors.
 *
 * # Safety
 * `params` must come from this library; `out` must be writable.
 */
enum FedsimStatus fedsim_params_len(const struct FedsimParams *params, size_t *out);

/**
 * Total scalar count over all tensors.
 *
 * # Safety
 * `params` must come from this library; `out` must be writable.
 */
enum FedsimStatus fedsim_params_numel(const struct FedsimParams *params, size_t *out);

/**
 * # Safety
 * `params` must come from this library or be null.
 */
void fedsim_params_free(struct FedsimParams *params);

/**
 * Relative L2 distance `‖fed − reference‖ / ‖reference‖` over trainable
 * entries.
 *
 * # Safety
 * Both handles must come from this library; `out` must be writable.
 */
enum FedsimStatus fedsim_weight_divergence(const struct FedsimParams *fed,
                                           const struct FedsimParams *reference,
                                           double *out);

/**
 * KS statistic between two class distributions of length `len`. Inputs
 * are normalized internally.
 *
 * # Safety
 * `p` and `q` must point to `len` readable doubles; `out` must be writable.
 */
enum FedsimStatus fedsim_ks_statistic(const double *p, const double *q, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDSIM_H */
