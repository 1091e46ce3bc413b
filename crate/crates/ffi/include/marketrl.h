#ifndef MARKETRL_H
#define MARKETRL_H

/* Generated by cbindgen from marketrl-ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum MrlStatus {
  MRL_STATUS_OK = 0,
  MRL_STATUS_NULL_POINTER = 1,
  MRL_STATUS_INVALID_ARGUMENT = 2,
  MRL_STATUS_DIMENSION_MISMATCH = 3,
  MRL_STATUS_EPISODE_DONE = 4,
  MRL_STATUS_IO = 5,
  MRL_STATUS_PARSE = 6,
  MRL_STATUS_INSUFFICIENT_DATA = 7,
  MRL_STATUS_BUFFER_TOO_SMALL = 8,
  MRL_STATUS_PANIC = 9,
  MRL_STATUS_OTHER = 10,
} MrlStatus;

/**
 * Trained agent loaded from a checkpoint.
 */
typedef struct MrlAgent MrlAgent;

/**
 * Single trading environment.
 */
typedef struct MrlEnv MrlEnv;

/**
 * `n_envs` trading environments stepped in lockstep.
 */
typedef struct MrlVecEnv MrlVecEnv;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mrl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mrl_version(void);

/**
 * Creates an environment over row-major `prices[n_times * n_assets]`.
 * `config_json` is an environment configuration object or NULL for defaults.
 *
 * # Safety
 * `prices` must point to `n_times * n_assets` doubles, `config_json` must be
 * NULL or a NUL-terminated string, and `out` must be writable.
 */
enum MrlStatus mrl_env_new(const double *prices,
                           size_t n_times,
                           size_t n_assets,
                           const char *config_json,
                           struct MrlEnv **out);

/**
 * # Safety
 * `env` must be NULL or a handle from [`mrl_env_new`] not yet freed.
 */
void mrl_env_free(struct MrlEnv *env);

/**
 * Observation length `1 + 2K + K*I`; 0 for a NULL handle.
 *
 * # Safety
 * `env` must be NULL or a live handle.
 */
size_t mrl_env_obs_dim(const struct MrlEnv *env);

/**
 * Number of action components (one per asset); 0 for a NULL handle.
 *
 * # Safety
 * `env` must be NULL or a live handle.
 */
size_t mrl_env_action_dim(const struct MrlEnv *env);

/**
 * Resets and writes the initial observation into `obs[obs_len]`.
 *
 * # Safety
 * `env` must be a live handle and `obs` writable for `obs_len` doubles.
 */
enum MrlStatus mrl_env_reset(struct MrlEnv *env, double *obs, size_t obs_len);

/**
 * Executes `action[action_len]` (shares per asset), writing the next
 * observation, the reward and whether the episode ended.
 *
 * # Safety
 * `env` must be a live handle; the buffers must have the given lengths and
 * `reward` / `done` must be writable.
 */
enum MrlStatus mrl_env_step(struct MrlEnv *env,
                            const double *action,
                            size_t action_len,
                            double *obs,
                            size_t obs_len,
                            double *reward,
                            uint8_t *done);

/**
 * Total asset value (cash plus holdings at current prices).
 *
 * # Safety
 * `env` must be a live handle and `value` writable.
 */
enum MrlStatus mrl_env_value(const struct MrlEnv *env, double *value);

/**
 * Creates `n_envs` identical environments stepped with `workers` threads.
 *
 * # Safety
 * As [`mrl_env_new`].
 */
enum MrlStatus mrl_vecenv_new(const double *prices,
                              size_t n_times,
                              size_t n_assets,
                              const char *config_json,
                              size_t n_envs,
                              size_t workers,
                              struct MrlVecEnv **out);

/**
 * # Safety
 * `venv` must be NULL or a handle from [`mrl_vecenv_new`] not yet freed.
 */
void mrl_vecenv_free(struct MrlVecEnv *venv);

/**
 * Number of sub-environments; 0 for a NULL handle.
 *
 * # Safety
 * `venv` must be NULL or a live handle.
 */
size_t mrl_vecenv_n_envs(const struct MrlVecEnv *venv);

/**
 * Per-row observation length; 0 for a NULL handle.
 *
 * # Safety
 * `venv` must be NULL or a live handle.
 */
size_t mrl_vecenv_obs_dim(const struct MrlVecEnv *venv);

/**
 * Resets every row, writing `N x obs_dim` observations.
 *
 * # Safety
 * `venv` must be a live handle and `obs` writable for `obs_len` doubles.
 */
enum MrlStatus mrl_vecenv_reset(struct MrlVecEnv *venv, double *obs, size_t obs_len);

/**
 * Steps every row with its row of `actions[N x action_dim]`.
 *
 * # Safety
 * `venv` must be a live handle; `actions` holds `N * action_dim` doubles,
 * `obs` `N * obs_dim`, and `rewards` / `dones` `N` entries each.
 */
enum MrlStatus mrl_vecenv_step(struct MrlVecEnv *venv,
                               const double *actions,
                               size_t actions_len,
                               double *obs,
                               size_t obs_len,
                               double *rewards,
                               uint8_t *dones,
                               size_t n);

/**
 * Loads a trained agent checkpoint (JSON) from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum MrlStatus mrl_agent_load(const char *path, struct MrlAgent **out);

/**
 * # Safety
 * `agent` must be NULL or a handle from [`mrl_agent_load`] not yet freed.
 */
void mrl_agent_free(struct MrlAgent *agent);

/**
 * Observation length the agent expects; 0 for a NULL handle.
 *
 * # Safety
 * `agent` must be NULL or a live handle.
 */
size_t mrl_agent_obs_dim(const struct MrlAgent *agent);

/**
 * Action length the agent produces; 0 for a NULL handle.
 *
 * # Safety
 * `agent` must be NULL or a live handle.
 */
size_t mrl_agent_action_dim(const struct MrlAgent *agent);

/**
 * Deterministic (greedy) environment action for `obs`.
 *
 * # Safety
 * `agent` must be a live handle and the buffers must have the given lengths.
 */
enum MrlStatus mrl_agent_act(const struct MrlAgent *agent,
                             const double *obs,
                             size_t obs_len,
                             double *action,
                             size_t action_len);

/**
 * Performance metrics of the equity curve `values[n]` as a JSON object,
 * written NUL-terminated into `buf[buf_len]`. `periods_per_year <= 0`
 * selects 252. `written` receives the JSON length without the NUL; on
 * `BufferTooSmall` it holds the required length.
 *
 * # Safety
 * `values` must hold `n` doubles, `buf` be writable for `buf_len` bytes and
 * `written` be writable.
 */
enum MrlStatus mrl_metrics_json(const double *values,
                                size_t n,
                                double periods_per_year,
                                char *buf,
                                size_t buf_len,
                                size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MARKETRL_H */
