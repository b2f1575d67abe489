#ifndef TRQAM_H
#define TRQAM_H

/* Generated by cbindgen from trqam-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum TrqamStatus {
  TRQAM_STATUS_OK = 0,
  TRQAM_STATUS_NULL_ARGUMENT = 1,
  TRQAM_STATUS_INVALID_UTF8 = 2,
  TRQAM_STATUS_CONFIG_ERROR = 3,
  TRQAM_STATUS_IO_ERROR = 4,
  TRQAM_STATUS_DOMAIN_ERROR = 5,
  TRQAM_STATUS_SHAPE_ERROR = 6,
  TRQAM_STATUS_DIVERGENCE_ERROR = 7,
  TRQAM_STATUS_VERIFICATION_FAILED = 8,
  TRQAM_STATUS_INTERNAL_ERROR = 9,
} TrqamStatus;

/**
 * Opaque run configuration.
 */
typedef struct TrqamConfig TrqamConfig;

/**
 * Opaque sampling policy: a loaded velocity field plus its grid.
 */
typedef struct TrqamPolicy TrqamPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *trqam_version(void);

/**
 * Message describing the most recent error on this thread. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *trqam_last_error_message(void);

/**
 * Release a string returned through an out-parameter.
 *
 * # Safety
 * `ptr` must come from this library and not have been freed already.
 */
void trqam_string_free(char *ptr);

/**
 * Parse a TOML run configuration. On success writes an owned handle.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum TrqamStatus trqam_config_parse(const char *text, struct TrqamConfig **out);

/**
 * Default configuration handle.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum TrqamStatus trqam_config_default(struct TrqamConfig **out);

/**
 * Override the configured seed.
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
enum TrqamStatus trqam_config_set_seed(struct TrqamConfig *cfg, uint64_t seed);

/**
 * Release a configuration handle.
 *
 * # Safety
 * `cfg` must come from this library and not have been freed already.
 */
void trqam_config_free(struct TrqamConfig *cfg);

/**
 * Generate the behavior dataset into `out_dir`.
 *
 * # Safety
 * `cfg` must be a live handle; `out_dir` a NUL-terminated path.
 */
enum TrqamStatus trqam_gen_data(const struct TrqamConfig *cfg, const char *out_dir);

/**
 * Pretrain the base velocity field from the dataset in `out_dir`.
 *
 * # Safety
 * `cfg` must be a live handle; `out_dir` a NUL-terminated path.
 */
enum TrqamStatus trqam_pretrain(const struct TrqamConfig *cfg, const char *out_dir);

/**
 * Run offline-to-online fine-tuning; checkpoints and metrics land in
 * `out_dir`.
 *
 * # Safety
 * `cfg` must be a live handle; `out_dir` a NUL-terminated path.
 */
enum TrqamStatus trqam_train(const struct TrqamConfig *cfg, const char *out_dir);

/**
 * Evaluate a checkpoint; writes the mean return and success rate through
 * the out-parameters.
 *
 * # Safety
 * Pointer arguments must be valid; strings NUL-terminated.
 */
enum TrqamStatus trqam_eval(const struct TrqamConfig *cfg,
                            const char *checkpoint,
                            const char *out_dir,
                            double *mean_return,
                            double *success_rate);

/**
 * Run the oracle suite; writes a JSON report string the caller must free
 * with `trqam_string_free`. Returns `VerificationFailed` when any check
 * fails (the report is still written).
 *
 * # Safety
 * Pointer arguments must be valid; strings NUL-terminated.
 */
enum TrqamStatus trqam_verify(const struct TrqamConfig *cfg,
                              const char *out_dir,
                              char **report_json);

/**
 * Load a checkpoint as a sampling policy for the named environment
 * (`"bandit"` or `"pointmass"`).
 *
 * # Safety
 * Pointer arguments must be valid; strings NUL-terminated.
 */
enum TrqamStatus trqam_policy_load(const char *checkpoint,
                                   const char *env,
                                   const char *activation,
                                   uintptr_t num_flow_steps,
                                   struct TrqamPolicy **out);

/**
 * Sample one action from the stochastic policy, conditioned on `state`,
 * deterministic given `seed`.
 *
 * # Safety
 * `policy` must be a live handle; `state` and `action_out` must point to
 * buffers of the stated lengths.
 */
enum TrqamStatus trqam_policy_sample(const struct TrqamPolicy *policy,
                                     const double *state,
                                     uintptr_t state_len,
                                     uint64_t seed,
                                     double *action_out,
                                     uintptr_t action_len);

/**
 * State dimension expected by a policy handle.
 *
 * # Safety
 * `policy` must be a live handle.
 */
uintptr_t trqam_policy_state_dim(const struct TrqamPolicy *policy);

/**
 * Action dimension produced by a policy handle.
 *
 * # Safety
 * `policy` must be a live handle.
 */
uintptr_t trqam_policy_action_dim(const struct TrqamPolicy *policy);

/**
 * Release a policy handle.
 *
 * # Safety
 * `policy` must come from this library and not have been freed already.
 */
void trqam_policy_free(struct TrqamPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRQAM_H */
