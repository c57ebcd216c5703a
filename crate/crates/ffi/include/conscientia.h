#ifndef CONSCIENTIA_H
#define CONSCIENTIA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CsStatus {
  CS_STATUS_OK = 0,
  CS_STATUS_NULL_ARGUMENT = 1,
  CS_STATUS_INVALID_UTF8 = 2,
  CS_STATUS_PARSE_ERROR = 3,
  CS_STATUS_INVALID_SCENARIO = 4,
  CS_STATUS_METRICS_ERROR = 5,
  CS_STATUS_PANIC = 6,
} CsStatus;

/**
 * Opaque simulation handle.
 */
typedef struct CsSimulation CsSimulation;

/**
 * Run summary. Latencies are in virtual milliseconds.
 */
typedef struct CsMetrics {
  uint64_t queries_submitted;
  uint64_t queries_serviced;
  uint64_t duplicate_replies;
  uint64_t rescheduled;
  uint64_t elections;
  uint64_t rv_splits;
  uint64_t messages_sent;
  uint64_t messages_dropped;
  double latency_mean_ms;
  uint64_t latency_p50_ms;
  uint64_t latency_p95_ms;
  uint64_t latency_max_ms;
  uint64_t pending_depth_max;
} CsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *cs_last_error_message(void);

/**
 * Parses and validates `scenario_toml`, then builds a simulation seeded
 * with the scenario's own seed.
 *
 * # Safety
 * `scenario_toml` must be a nul-terminated string and `out` a writable
 * pointer.
 */
enum CsStatus cs_simulation_new(const char *scenario_toml, struct CsSimulation **out);

/**
 * Like [`cs_simulation_new`] with an explicit seed.
 *
 * # Safety
 * Same as [`cs_simulation_new`].
 */
enum CsStatus cs_simulation_new_seeded(const char *scenario_toml,
                                       uint64_t seed,
                                       struct CsSimulation **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `sim` must come from `cs_simulation_new*` and not be used afterwards.
 */
void cs_simulation_free(struct CsSimulation *sim);

/**
 * Runs to the scenario's end. `events` (optional) receives the number of
 * events processed.
 *
 * # Safety
 * `sim` must be a live handle; `events` null or writable.
 */
enum CsStatus cs_simulation_run(struct CsSimulation *sim, uint64_t *events);

/**
 * Runs until virtual time `t_ms`.
 *
 * # Safety
 * Same as [`cs_simulation_run`].
 */
enum CsStatus cs_simulation_run_until(struct CsSimulation *sim, uint64_t t_ms, uint64_t *events);

/**
 * Current virtual time in milliseconds, or 0 for a null handle.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
uint64_t cs_simulation_now(const struct CsSimulation *sim);

/**
 * Summarizes the trace so far into `out`.
 *
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum CsStatus cs_simulation_metrics(const struct CsSimulation *sim, struct CsMetrics *out);

/**
 * Number of trace records so far, or 0 for a null handle.
 *
 * # Safety
 * `sim` must be null or a live handle.
 */
size_t cs_simulation_trace_len(const struct CsSimulation *sim);

/**
 * The trace as JSON lines. Release with [`cs_string_free`].
 *
 * # Safety
 * `sim` must be a live handle and `out` writable.
 */
enum CsStatus cs_simulation_trace_text(const struct CsSimulation *sim, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void cs_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONSCIENTIA_H */
