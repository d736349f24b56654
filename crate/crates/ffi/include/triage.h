#ifndef TRIAGE_H
#define TRIAGE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TriageStatus {
  TRIAGE_STATUS_OK = 0,
  TRIAGE_STATUS_NULL_ARGUMENT = 1,
  TRIAGE_STATUS_INVALID_UTF8 = 2,
  /**
   * A JSON argument did not parse.
   */
  TRIAGE_STATUS_PARSE = 3,
  /**
   * The engine rejected the request, e.g. a tick out of order.
   */
  TRIAGE_STATUS_REJECTED = 4,
  /**
   * The checkpoint is corrupt or does not match the history.
   */
  TRIAGE_STATUS_CHECKPOINT = 5,
  /**
   * A panic was caught at the boundary.
   */
  TRIAGE_STATUS_INTERNAL = 6,
} TriageStatus;

/**
 * Opaque engine handle.
 */
typedef struct TriageEngine TriageEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates an engine with the given residual tolerance. New violation types
 * are registered on first sight.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum TriageStatus triage_engine_new(double epsilon, struct TriageEngine **out);

/**
 * Releases an engine. Null is ignored.
 *
 * # Safety
 * `engine` must come from this library and not have been freed already.
 */
void triage_engine_free(struct TriageEngine *engine);

/**
 * Ingests one tick given as JSON and returns the tick report as JSON.
 * Nothing changes on failure.
 *
 * # Safety
 * `engine` must be a live handle, `tick_json` a NUL-terminated string and
 * `report_out` writable. The report must be released with
 * [`triage_string_free`].
 */
enum TriageStatus triage_engine_ingest_tick(struct TriageEngine *engine,
                                            const char *tick_json,
                                            char **report_out);

/**
 * Current ranking of the open events as a JSON array.
 *
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum TriageStatus triage_engine_ranking(const struct TriageEngine *engine, char **out);

/**
 * Linear term of the type's current model for `len` factor values.
 *
 * # Safety
 * `factors` must point to `len` readable doubles and `out` must be writable.
 */
enum TriageStatus triage_engine_predict(const struct TriageEngine *engine,
                                        const char *type_id,
                                        const double *factors,
                                        uintptr_t len,
                                        double *out);

/**
 * Tick the engine expects next.
 *
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum TriageStatus triage_engine_next_tick(const struct TriageEngine *engine, uint64_t *out);

/**
 * The stored history, one JSON record per line.
 *
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum TriageStatus triage_engine_history(const struct TriageEngine *engine, char **out);

/**
 * Sealed checkpoint of the models, flags and tick marker, as JSON.
 *
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum TriageStatus triage_engine_export_checkpoint(const struct TriageEngine *engine, char **out);

/**
 * Rebuilds an engine from a checkpoint and the history it was taken with.
 *
 * # Safety
 * Both strings must be NUL-terminated and `out` writable.
 */
enum TriageStatus triage_engine_import_checkpoint(const char *checkpoint_json,
                                                  const char *history_jsonl,
                                                  struct TriageEngine **out);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *triage_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void triage_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRIAGE_H */
