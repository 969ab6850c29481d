/* C interface for kdkit. Generated by cbindgen; do not edit. */

#ifndef KDKIT_H
#define KDKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum KdStatus {
  KD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  KD_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  KD_STATUS_INVALID_UTF8 = 2,
  /**
   * The configuration failed to parse or validate.
   */
  KD_STATUS_CONFIG = 3,
  /**
   * A pipeline stage failed (I/O, data, training, or a caught panic).
   */
  KD_STATUS_RUNTIME = 4,
} KdStatus;

/**
 * Opaque parsed run configuration.
 */
typedef struct KdConfig KdConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string; never null, never freed.
 */
const char *kdkit_version(void);

/**
 * Message from the most recent failing call on this thread, or null if no
 * call has failed yet. The pointer is invalidated by the next failing call
 * on the same thread; do not free it.
 */
const char *kdkit_last_error(void);

/**
 * Parse a TOML run configuration.
 *
 * On success writes a new handle to `out` and returns `Ok`; on failure
 * writes null and returns `Config` (or an argument status).
 *
 * # Safety
 * `toml_text` must be a nul-terminated string and `out` a valid pointer.
 */
enum KdStatus kdkit_config_parse(const char *toml_text, struct KdConfig **out);

/**
 * Override the run seed, as the CLI `--seed` flag would.
 *
 * # Safety
 * `cfg` must be a live handle from [`kdkit_config_parse`].
 */
enum KdStatus kdkit_config_set_seed(struct KdConfig *cfg, uint64_t seed);

/**
 * Release a config handle. Null is ignored.
 *
 * # Safety
 * `cfg` must be null or a handle from [`kdkit_config_parse`] that has not
 * already been freed.
 */
void kdkit_config_free(struct KdConfig *cfg);

/**
 * Execute the full pipeline: task data, teacher, optional
 * teacher-prediction pretraining, distillation, evaluation. Artifacts land
 * under `out_dir` (falling back to the config's `out_dir` key when the
 * argument is null). If `summary_json` is non-null it receives the run
 * summary as a JSON string owned by the caller.
 *
 * # Safety
 * `cfg` must be a live handle; `out_dir` null or nul-terminated;
 * `summary_json` null or a valid pointer.
 */
enum KdStatus kdkit_run(const struct KdConfig *cfg, const char *out_dir, char **summary_json);

/**
 * Number of stored parameters for an encoder of the given geometry with
 * `num_param_sets` stored layer sets. With `include_embeddings` false only
 * the shared layer stacks are counted, which is how model sizes are
 * usually quoted.
 *
 * # Safety
 * `out_count` must be a valid pointer.
 */
enum KdStatus kdkit_parameter_count(uint64_t vocab_size,
                                    uint64_t max_seq_len,
                                    uint64_t hidden_dim,
                                    uint64_t num_heads,
                                    uint64_t ff_dim,
                                    uint64_t num_classes,
                                    uint64_t num_param_sets,
                                    bool include_embeddings,
                                    uint64_t *out_count);

/**
 * Release a string returned through an out-parameter. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string produced by this library that has not
 * already been freed.
 */
void kdkit_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* KDKIT_H */
