#ifndef KGREC_H
#define KGREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum KgrecStatus {
  KGREC_STATUS_OK = 0,
  KGREC_STATUS_NULL_POINTER = 1,
  KGREC_STATUS_INVALID_UTF8 = 2,
  KGREC_STATUS_BAD_REQUEST = 3,
  KGREC_STATUS_IO = 4,
  KGREC_STATUS_DATA = 5,
  KGREC_STATUS_NUMERIC = 6,
  KGREC_STATUS_INTERNAL = 7,
  KGREC_STATUS_PANIC = 8,
} KgrecStatus;

// A loaded checkpoint with precomputed entity representations.
typedef struct KgrecModel KgrecModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint directory. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum KgrecStatus kgrec_model_load(const char *path, struct KgrecModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from [`kgrec_model_load`] and not be used afterwards.
void kgrec_model_free(struct KgrecModel *model);

// Runs one chat turn. `request_json` is a chat request object
// (`{"history": [...], "top_k": 5, "decode": "greedy"}`); `*out` receives
// the response object as JSON.
//
// # Safety
// `model` must be a live handle, `request_json` NUL-terminated, `out` valid.
enum KgrecStatus kgrec_chat_json(const struct KgrecModel *model,
                                 const char *request_json,
                                 char **out);

// Top-`k` items for a single seeker utterance, as a JSON array of
// `{entity_id, name, year, score}`.
//
// # Safety
// `model` must be a live handle, `utterance` NUL-terminated, `out` valid.
enum KgrecStatus kgrec_recommend(const struct KgrecModel *model,
                                 const char *utterance,
                                 uintptr_t k,
                                 char **out);

// Checkpoint hash of a loaded model; free with [`kgrec_string_free`].
//
// # Safety
// `model` must be a live handle and `out` valid.
enum KgrecStatus kgrec_checkpoint_hash(const struct KgrecModel *model, char **out);

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread; do not free.
const char *kgrec_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void kgrec_string_free(char *s);

// Library version, statically allocated.
const char *kgrec_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KGREC_H */
