#ifndef HVAC_MBRL_H
#define HVAC_MBRL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum HvacStatus {
  HVAC_STATUS_OK = 0,
  HVAC_STATUS_NULL_POINTER = 1,
  HVAC_STATUS_INVALID_ARGUMENT = 2,
  HVAC_STATUS_IO = 3,
  HVAC_STATUS_PARSE = 4,
  HVAC_STATUS_CHECKPOINT = 5,
  HVAC_STATUS_NUMERIC = 6,
  HVAC_STATUS_INSUFFICIENT_DATA = 7,
  /**
   * The environment's traces are used up.
   */
  HVAC_STATUS_EXHAUSTED = 8,
  HVAC_STATUS_PANIC = 9,
} HvacStatus;

/**
 * Simulated two-zone plant.
 */
typedef struct HvacEnv HvacEnv;

/**
 * Trained dynamics model.
 */
typedef struct HvacModel HvacModel;

/**
 * Cloned policy.
 */
typedef struct HvacPolicy HvacPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 */
size_t hvac_last_error(char *buf, size_t len);

/**
 * Build an environment from a TOML experiment configuration; `config`
 * may be null for all defaults. `seed` overrides the trace seed.
 */
enum HvacStatus hvac_env_new(const char *config, uint64_t seed, struct HvacEnv **env);

/**
 * Advance one control interval with `action` (4 values: TS west, TS
 * east, F west, F east). Writes 5 observation values and the reward.
 */
enum HvacStatus hvac_env_step(struct HvacEnv *env,
                              const double *action,
                              double *obs_out,
                              double *reward_out);

void hvac_env_free(struct HvacEnv *env);

enum HvacStatus hvac_model_load(const char *file, struct HvacModel **model);

/**
 * Window length W the model expects.
 */
size_t hvac_model_window(const struct HvacModel *model);

/**
 * Next observation from `window` rows of observations (`window * 5`
 * values) and actions (`window * 4`).
 */
enum HvacStatus hvac_model_predict(const struct HvacModel *model,
                                   const double *obs,
                                   const double *acts,
                                   size_t window,
                                   double *obs_out);

/**
 * One planner decision with the default safe action space and reward.
 * `obs` holds the last W observations, `acts` the W-1 actions between
 * them, `prev` the last executed action.
 */
enum HvacStatus hvac_plan(const struct HvacModel *model,
                          const double *obs,
                          const double *acts,
                          size_t window,
                          const double *prev,
                          size_t samples,
                          uint64_t seed,
                          double *action_out);

void hvac_model_free(struct HvacModel *model);

enum HvacStatus hvac_policy_load(const char *file, struct HvacPolicy **policy);

size_t hvac_policy_window(const struct HvacPolicy *policy);

/**
 * Policy action: `obs` holds W observations, `prev_acts` the W actions
 * preceding each of them (so the last row is the executed action the
 * output is rate-limited against).
 */
enum HvacStatus hvac_policy_act(const struct HvacPolicy *policy,
                                const double *obs,
                                const double *prev_acts,
                                size_t window,
                                double *action_out);

void hvac_policy_free(struct HvacPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HVAC_MBRL_H */
