#ifndef CONFAB_H
#define CONFAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum ConfabStatus {
  CONFAB_STATUS_OK = 0,
  CONFAB_STATUS_NULL_ARGUMENT = 1,
  CONFAB_STATUS_INVALID_UTF8 = 2,
  CONFAB_STATUS_PARSE = 3,
  CONFAB_STATUS_INVALID = 4,
  CONFAB_STATUS_NOT_FOUND = 5,
  CONFAB_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * The world stopped after a safety audit failed.
   */
  CONFAB_STATUS_HALTED = 7,
  CONFAB_STATUS_PANIC = 99,
} ConfabStatus;

/**
 * Opaque simulation handle.
 */
typedef struct ConfabWorld ConfabWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a world from a run document. Fleet and component references must
 * be inline; paths are resolved against the current directory.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` must be writable.
 */
enum ConfabStatus confab_world_from_json(const char *json, struct ConfabWorld **out);

/**
 * # Safety
 * `w` must come from [`confab_world_from_json`] and not be used afterwards.
 */
void confab_world_free(struct ConfabWorld *w);

/**
 * Advances one tick; `out_events` receives the number of events emitted.
 *
 * # Safety
 * `w` must be a live handle; `out_events` may be null.
 */
enum ConfabStatus confab_world_tick(struct ConfabWorld *w, uintptr_t *out_events);

/**
 * Advances up to `ticks` ticks, stopping early if the world halts.
 *
 * # Safety
 * `w` must be a live handle.
 */
enum ConfabStatus confab_world_run(struct ConfabWorld *w, uint64_t ticks);

/**
 * # Safety
 * `w` must be a live handle; `out` must be writable.
 */
enum ConfabStatus confab_world_now(struct ConfabWorld *w, uint64_t *out);

/**
 * Queues a commission document for the next intake phase.
 *
 * # Safety
 * `w` must be a live handle; `json` must be NUL-terminated.
 */
enum ConfabStatus confab_world_submit(struct ConfabWorld *w, const char *json);

/**
 * Copies the whole event log as NDJSON.
 *
 * # Safety
 * `w` must be a live handle; `buf` must hold `cap` bytes.
 */
enum ConfabStatus confab_world_event_log(struct ConfabWorld *w,
                                         char *buf,
                                         uintptr_t cap,
                                         uintptr_t *out_len);

/**
 * Copies a commission's status name (`completed`, `denied`, ...).
 *
 * # Safety
 * `w` must be a live handle; `id` NUL-terminated; `buf` must hold `cap` bytes.
 */
enum ConfabStatus confab_commission_status(struct ConfabWorld *w,
                                           const char *id,
                                           char *buf,
                                           uintptr_t cap,
                                           uintptr_t *out_len);

/**
 * Evaluates a constraint over a JSON map of device id to device state.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out_holds` must be writable.
 */
enum ConfabStatus confab_constraint_check(const char *constraint,
                                          const char *states_json,
                                          bool *out_holds);

/**
 * Copies the message of the last failed call on this thread.
 *
 * # Safety
 * `buf` must hold `cap` bytes.
 */
enum ConfabStatus confab_last_error(char *buf, uintptr_t cap, uintptr_t *out_len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *confab_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFAB_H */
