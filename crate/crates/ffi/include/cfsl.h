#ifndef CFSL_H
#define CFSL_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfslStatus {
  CFSL_STATUS_OK = 0,
  CFSL_STATUS_NULL_POINTER = 1,
  CFSL_STATUS_INVALID_ARGUMENT = 2,
  CFSL_STATUS_IO = 3,
  CFSL_STATUS_INVALID_CONFIG = 4,
  CFSL_STATUS_SAMPLING_FAILED = 5,
  CFSL_STATUS_BUFFER_TOO_SMALL = 6,
  CFSL_STATUS_STREAM_EXHAUSTED = 10,
  CFSL_STATUS_PAST_SET_INACCESSIBLE = 11,
  CFSL_STATUS_OUT_OF_ORDER = 12,
  CFSL_STATUS_TARGET_NOT_READY = 13,
  CFSL_STATUS_TARGET_NOT_REQUESTED = 14,
  CFSL_STATUS_SESSION_CLOSED = 15,
  CFSL_STATUS_PREDICTION_SHAPE = 16,
  CFSL_STATUS_BANK_APPEND_ONLY = 17,
  CFSL_STATUS_PANIC = 99,
} CfslStatus;

typedef enum CfslTaskKind {
  CFSL_TASK_KIND_SINGLE_FSL = 0,
  CFSL_TASK_KIND_NEW_SAMPLES = 1,
  CFSL_TASK_KIND_NEW_CLASSES = 2,
  CFSL_TASK_KIND_NEW_CLASSES_OVERWRITE = 3,
  CFSL_TASK_KIND_NEW_CLASSES_NEW_SAMPLES = 4,
} CfslTaskKind;

/**
 * A dataset pack loaded in memory.
 */
typedef struct CfslPack CfslPack;

/**
 * One episode streamed under the sequential guard.
 */
typedef struct CfslSession CfslSession;

typedef struct CfslTaskConfig {
  uint32_t nss;
  uint32_t cci;
  uint32_t n_way;
  uint32_t k_shot;
  uint32_t k_target;
  bool overwrite;
  uint64_t seed;
} CfslTaskConfig;

typedef struct CfslScore {
  double accuracy;
  uint64_t correct;
  uint64_t total;
  double atm;
  uint64_t memory_bytes;
  uint64_t episode_index;
} CfslScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Valid until the next
 * call into the library from this thread.
 */
const char *cfsl_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CfslStatus cfsl_pack_open(const char *path, struct CfslPack **out);

/**
 * # Safety
 * `pack` must come from [`cfsl_pack_open`] and not be used afterwards.
 */
void cfsl_pack_free(struct CfslPack *pack);

/**
 * # Safety
 * All pointers must be valid.
 */
enum CfslStatus cfsl_pack_geometry(const struct CfslPack *pack,
                                   uint32_t *height,
                                   uint32_t *width,
                                   uint32_t *channels,
                                   uint32_t *num_classes);

/**
 * # Safety
 * All pointers must be valid.
 */
enum CfslStatus cfsl_config_task_kind(const struct CfslTaskConfig *config, enum CfslTaskKind *out);

/**
 * Number of distinct labels a learner must be able to output.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CfslStatus cfsl_config_output_label_count(const struct CfslTaskConfig *config, uint32_t *out);

/**
 * Samples episode `episode_index` and opens a session over it.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CfslStatus cfsl_session_new(const struct CfslPack *pack,
                                 const struct CfslTaskConfig *config,
                                 uint64_t episode_index,
                                 struct CfslSession **out);

/**
 * # Safety
 * `session` must come from [`cfsl_session_new`] and not be used afterwards.
 */
void cfsl_session_free(struct CfslSession *session);

/**
 * Sizes needed for support and target buffers: samples per support set,
 * samples in the target set and bytes per sample.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CfslStatus cfsl_session_sizes(const struct CfslSession *session,
                                   uint32_t *support_count,
                                   uint32_t *target_count,
                                   uint64_t *sample_bytes);

/**
 * Advances to the next support set and copies its labels and pixels out.
 * `position` receives the 1-based set position.
 *
 * # Safety
 * `labels` must hold `labels_capacity` values and `pixels` must hold
 * `pixels_capacity` bytes.
 */
enum CfslStatus cfsl_session_next_support(struct CfslSession *session,
                                          uint32_t *labels,
                                          size_t labels_capacity,
                                          uint8_t *pixels,
                                          size_t pixels_capacity,
                                          uint32_t *position);

/**
 * Appends `len` bytes under `tag` to the session's memory bank.
 *
 * # Safety
 * `tag` must be NUL-terminated and `data` must hold `len` bytes.
 */
enum CfslStatus cfsl_session_store(struct CfslSession *session,
                                   const char *tag,
                                   const uint8_t *data,
                                   size_t len,
                                   uint32_t element_width);

/**
 * Copies the target set pixels out once every support set was consumed.
 *
 * # Safety
 * `pixels` must hold `pixels_capacity` bytes.
 */
enum CfslStatus cfsl_session_request_target(struct CfslSession *session,
                                            uint8_t *pixels,
                                            size_t pixels_capacity);

/**
 * Scores predictions for the target set, in target order.
 *
 * # Safety
 * `predictions` must hold `count` labels and `score` must be valid.
 */
enum CfslStatus cfsl_session_submit(struct CfslSession *session,
                                    const uint32_t *predictions,
                                    size_t count,
                                    struct CfslScore *score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CFSL_H */
