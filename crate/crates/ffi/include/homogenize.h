#ifndef HOMOGENIZE_H
#define HOMOGENIZE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define HM_OK 0

#define HM_ERR_PARAMETER 1

#define HM_ERR_SHAPE 2

#define HM_ERR_OVERFLOW 3

#define HM_ERR_ELLIPTICITY 4

#define HM_ERR_MONOTONICITY 5

#define HM_ERR_SOLVER 6

#define HM_ERR_STATISTICS 7

#define HM_ERR_RESOLUTION 8

#define HM_ERR_INVARIANT 9

#define HM_ERR_UNSUPPORTED 10

#define HM_ERR_CONFIG 11

#define HM_ERR_IO 12

#define HM_ERR_FORMAT 13

/**
 * A required pointer argument was null.
 */
#define HM_ERR_NULL -1

/**
 * A string argument was not valid UTF-8.
 */
#define HM_ERR_UTF8 -2

/**
 * The library panicked; the handle involved should be considered poisoned.
 */
#define HM_ERR_PANIC -3

/**
 * An output buffer was too small; the required size was still written.
 */
#define HM_ERR_BUFFER -4

/**
 * The manifest of a finished run.
 */
typedef struct HmRun HmRun;

/**
 * A scenario configuration.
 */
typedef struct HmScenario HmScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *hm_version(void);

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *hm_last_error(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void hm_string_free(char *s);

/**
 * Parses and validates a TOML scenario.
 *
 * # Safety
 * `toml` must be a nul-terminated string; `out` must be writable.
 */
int32_t hm_scenario_from_toml(const char *toml, struct HmScenario **out);

/**
 * One of the built-in scenarios (see `homogenize list`).
 *
 * # Safety
 * `name` must be a nul-terminated string; `out` must be writable.
 */
int32_t hm_scenario_builtin(const char *name, uint64_t seed, struct HmScenario **out);

/**
 * Replaces the scenario seed.
 *
 * # Safety
 * `s` must be a live scenario handle.
 */
int32_t hm_scenario_set_seed(struct HmScenario *s, uint64_t seed);

/**
 * Sets the artifact directory; null disables persistence.
 *
 * # Safety
 * `s` must be a live scenario handle; `dir` null or nul-terminated.
 */
int32_t hm_scenario_set_output(struct HmScenario *s, const char *dir);

/**
 * Canonical SHA-256 of the scenario, as a string to free with [`hm_string_free`].
 *
 * # Safety
 * `s` must be a live scenario handle; `out` must be writable.
 */
int32_t hm_scenario_hash(const struct HmScenario *s, char **out);

/**
 * # Safety
 * `s` must be null or a handle not yet freed.
 */
void hm_scenario_free(struct HmScenario *s);

/**
 * Runs the scenario on `workers` threads (0 = all cores). A run whose
 * verdicts fail still returns `HM_OK`; check [`hm_run_pass`].
 *
 * # Safety
 * `s` must be a live scenario handle; `out` must be writable.
 */
int32_t hm_scenario_run(const struct HmScenario *s, size_t workers, struct HmRun **out);

/**
 * Effective tensor of the cell stage, row-major into `buf` (`capacity` doubles).
 * `dim` receives the dimension; if `dim²` exceeds `capacity` the call returns
 * `HM_ERR_BUFFER` without writing `buf`.
 *
 * # Safety
 * `s` must be a live scenario handle; `buf` must hold `capacity` doubles;
 * `dim` must be writable.
 */
int32_t hm_effective_tensor(const struct HmScenario *s,
                            size_t workers,
                            double *buf,
                            size_t capacity,
                            size_t *dim);

/**
 * # Safety
 * `r` must be a live run handle.
 */
bool hm_run_pass(const struct HmRun *r);

/**
 * The run manifest as JSON, to free with [`hm_string_free`].
 *
 * # Safety
 * `r` must be a live run handle; `out` must be writable.
 */
int32_t hm_run_manifest_json(const struct HmRun *r, char **out);

/**
 * # Safety
 * `r` must be null or a handle not yet freed.
 */
void hm_run_free(struct HmRun *r);

/**
 * Mean value of `f(y, dim, user)` over growing balls in `dim` dimensions, with
 * an error indicator. `f` is called from one library thread, never concurrently.
 *
 * # Safety
 * `f` must be a valid function pointer; `value` and `error` must be writable.
 */
int32_t hm_mean_value(double (*f)(const double *y, size_t dim, void *user),
                      void *user,
                      size_t dim,
                      double *value,
                      double *error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HOMOGENIZE_H */
