#ifndef SAFEAGG_H
#define SAFEAGG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by fallible calls.
 */
typedef enum SafeaggStatus {
  SAFEAGG_STATUS_OK = 0,
  SAFEAGG_STATUS_NULL_POINTER = 1,
  SAFEAGG_STATUS_INVALID_UTF8 = 2,
  SAFEAGG_STATUS_INVALID_CONFIG = 3,
  SAFEAGG_STATUS_SIMULATION = 4,
  SAFEAGG_STATUS_FINISHED = 5,
  SAFEAGG_STATUS_INVALID_ARGUMENT = 6,
  SAFEAGG_STATUS_PANIC = 7,
} SafeaggStatus;

/**
 * Opaque report handle.
 */
typedef struct SafeaggReport SafeaggReport;

/**
 * Opaque scenario handle.
 */
typedef struct SafeaggScenario SafeaggScenario;

/**
 * Detection rates summed over the run.
 */
typedef struct SafeaggRates {
  double dr;
  double cr;
  double fpr;
} SafeaggRates;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL.
 *
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *safeagg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *safeagg_version(void);

/**
 * Parse a TOML scenario and build a simulation.
 *
 * # Safety
 * `toml` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum SafeaggStatus safeagg_scenario_new(const char *toml, struct SafeaggScenario **out);

/**
 * Release a scenario. NULL is ignored.
 *
 * # Safety
 * `scenario` must come from [`safeagg_scenario_new`] and not be used afterwards.
 */
void safeagg_scenario_free(struct SafeaggScenario *scenario);

/**
 * Number of completed rounds.
 *
 * # Safety
 * `scenario` must be a live handle or NULL.
 */
uint32_t safeagg_scenario_round(const struct SafeaggScenario *scenario);

/**
 * Run one round. On success `row_json` (if not NULL) receives the round row
 * as a JSON object. Returns `Finished` once the configured rounds are done.
 *
 * # Safety
 * `scenario` must be a live handle; `row_json` must be NULL or valid.
 */
enum SafeaggStatus safeagg_scenario_step(struct SafeaggScenario *scenario, char **row_json);

/**
 * Run the remaining rounds and turn the scenario into a report. The
 * scenario handle stays valid but accepts no further steps.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
enum SafeaggStatus safeagg_scenario_finish(struct SafeaggScenario *scenario,
                                           struct SafeaggReport **out);

/**
 * Release a report. NULL is ignored.
 *
 * # Safety
 * `report` must come from [`safeagg_scenario_finish`] and not be used afterwards.
 */
void safeagg_report_free(struct SafeaggReport *report);

/**
 * Report as JSON. Free with [`safeagg_string_free`]. NULL on bad input.
 *
 * # Safety
 * `report` must be a live handle or NULL.
 */
char *safeagg_report_json(const struct SafeaggReport *report);

/**
 * Per-round table as CSV. Free with [`safeagg_string_free`]. NULL on bad input.
 *
 * # Safety
 * `report` must be a live handle or NULL.
 */
char *safeagg_report_csv(const struct SafeaggReport *report);

/**
 * Fill `out` with the run-level detection rates.
 *
 * # Safety
 * `report` must be a live handle; `out` must be valid.
 */
enum SafeaggStatus safeagg_report_rates(const struct SafeaggReport *report,
                                        struct SafeaggRates *out);

/**
 * Release a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void safeagg_string_free(char *s);

/**
 * Detection bound R_H for a subgroup of `n` users and parameter range `eps`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SafeaggStatus safeagg_compute_rh(uintptr_t n, double eps, double *out);

/**
 * Adaptive threshold over the last `window` values of `history`.
 * Returns +inf while fewer than `window` values are available.
 *
 * # Safety
 * `history` must point to `len` readable doubles (may be NULL when `len` is 0).
 */
double safeagg_adaptive_threshold(const double *history,
                                  uintptr_t len,
                                  double rho,
                                  uintptr_t window);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAFEAGG_H */
