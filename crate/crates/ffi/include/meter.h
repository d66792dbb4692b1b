#ifndef METER_H
#define METER_H

/* Generated by cbindgen from meter-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define METER_OK 0

#define METER_ERR_NULL_ARGUMENT -1

#define METER_ERR_INVALID_UTF8 -2

#define METER_ERR_CONFIG -3

#define METER_ERR_DATA -4

#define METER_ERR_SHAPE -5

#define METER_ERR_RUNTIME -6

// Opaque run configuration.
typedef struct MeterConfigHandle MeterConfigHandle;

// Opaque trained model bundle: snapshot plus input standardization.
typedef struct MeterModelHandle MeterModelHandle;

// Opaque streaming session.
typedef struct MeterSessionHandle MeterSessionHandle;

// One scored stream instance.
typedef struct MeterDecision {
  // Step index within this session.
  uint64_t t;
  // Mean squared reconstruction error used as the anomaly score.
  double score;
  // Concept uncertainty of the instance.
  double uncertainty;
  // 1 when the dynamic (shift-adapted) detector produced the score.
  uint8_t dynamic_route;
  // 1 when this step launched an offline update.
  uint8_t update_fired;
  // Snapshot version the step was scored against.
  uint64_t version;
} MeterDecision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent error on this thread, or NULL when no
// error has occurred. The pointer stays valid until the next failing call
// on the same thread.
const char *meter_last_error_message(void);

// Library version as a static string.
const char *meter_version(void);

// Fresh configuration with the library defaults.
struct MeterConfigHandle *meter_config_new(void);

// Applies one dotted-key assignment, e.g. ("iec.mu_p", "0.2").
//
// # Safety
// `cfg` must be a live handle from `meter_config_new`; `key` and `value`
// must be NUL-terminated strings.
int meter_config_set(struct MeterConfigHandle *cfg, const char *key, const char *value);

// # Safety
// `cfg` must be a handle from `meter_config_new`, not yet freed.
void meter_config_free(struct MeterConfigHandle *cfg);

// Trains on the leading `data.h_r` fraction of a CSV stream and returns the
// model bundle, or NULL on failure.
//
// # Safety
// `cfg` must be a live config handle; `csv_path` a NUL-terminated path.
struct MeterModelHandle *meter_train_csv(const struct MeterConfigHandle *cfg, const char *csv_path);

// Trains on a dense row-major feature buffer of `n_rows × n_cols`.
//
// # Safety
// `cfg` must be a live config handle; `features` must point to at least
// `n_rows * n_cols` readable doubles.
struct MeterModelHandle *meter_train_buffer(const struct MeterConfigHandle *cfg,
                                            const double *features,
                                            size_t n_rows,
                                            size_t n_cols);

// Loads a model bundle from a train output directory (snapshot.json plus
// transform.json). Returns NULL on failure.
//
// # Safety
// `dir` must be a NUL-terminated path.
struct MeterModelHandle *meter_model_load(const char *dir);

// Writes snapshot.json and transform.json into a directory.
//
// # Safety
// `model` must be a live model handle; `dir` a NUL-terminated path.
int meter_model_save(const struct MeterModelHandle *model, const char *dir);

// Input width the model expects (before standardization).
//
// # Safety
// `model` must be a live model handle.
size_t meter_model_feature_dim(const struct MeterModelHandle *model);

// # Safety
// `model` must be a handle from this library, not yet freed.
void meter_model_free(struct MeterModelHandle *model);

// Opens a streaming session over the model. With `async_updates` nonzero,
// offline updates run on a background thread while scoring continues on the
// previous snapshot version.
//
// # Safety
// `model` and `cfg` must be live handles.
struct MeterSessionHandle *meter_session_new(const struct MeterModelHandle *model,
                                             const struct MeterConfigHandle *cfg,
                                             int async_updates);

// Scores one raw (unstandardized) instance and fills `out`.
//
// # Safety
// `session` must be a live session handle, `features` must point to
// `n_features` readable doubles, and `out` must be writable.
int meter_session_step(struct MeterSessionHandle *session,
                       const double *features,
                       size_t n_features,
                       struct MeterDecision *out);

// Latest published snapshot version visible to the session.
//
// # Safety
// `session` must be a live session handle.
uint64_t meter_session_version(const struct MeterSessionHandle *session);

// Waits for any in-flight update and releases the session.
//
// # Safety
// `session` must be a handle from `meter_session_new`, not yet freed.
void meter_session_free(struct MeterSessionHandle *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METER_H */
