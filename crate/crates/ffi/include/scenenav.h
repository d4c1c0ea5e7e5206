#ifndef SCENENAV_H
#define SCENENAV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SnStatus {
  SN_STATUS_OK = 0,
  SN_STATUS_NULL_ARGUMENT = 1,
  SN_STATUS_INVALID_INPUT = 2,
  SN_STATUS_IO = 3,
  SN_STATUS_FORMAT = 4,
  SN_STATUS_CONFIG = 5,
  SN_STATUS_PIPELINE = 6,
  /**
   * The stream has no further blocks.
   */
  SN_STATUS_FINISHED = 7,
  SN_STATUS_PANIC = 8,
} SnStatus;

/**
 * Opaque pipeline handle.
 */
typedef struct SnPipeline SnPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until
 * the next failing call on the same thread.
 */
const char *sn_last_error(void);

/**
 * Opens a session directory. `config_path` may be NULL.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must be writable.
 */
enum SnStatus sn_pipeline_open(const char *session_dir,
                               const char *config_path,
                               struct SnPipeline **out);

/**
 * Processes the next block; `Finished` once the stream is exhausted.
 * `block_out` (may be NULL) receives the processed block index.
 *
 * # Safety
 * `h` must come from `sn_pipeline_open`.
 */
enum SnStatus sn_pipeline_step(struct SnPipeline *h, uint64_t *block_out);

/**
 * Processes every remaining block.
 *
 * # Safety
 * `h` must come from `sn_pipeline_open`.
 */
enum SnStatus sn_pipeline_run(struct SnPipeline *h);

/**
 * Semantic goal class for the following blocks; negative clears it.
 *
 * # Safety
 * `h` must come from `sn_pipeline_open`.
 */
enum SnStatus sn_pipeline_set_goal_class(struct SnPipeline *h, int64_t class_id);

/**
 * Number of processed blocks and aligned frames.
 *
 * # Safety
 * `h` must come from `sn_pipeline_open`; outputs may be NULL.
 */
enum SnStatus sn_pipeline_counts(struct SnPipeline *h, uint64_t *blocks, uint64_t *frames);

/**
 * Global pose of the `i`-th aligned frame as a row-major 3×4 matrix.
 *
 * # Safety
 * `h` must come from `sn_pipeline_open`; `pose_out` must hold 12 doubles.
 */
enum SnStatus sn_pipeline_pose(struct SnPipeline *h,
                               uint64_t i,
                               uint64_t *frame_out,
                               double *pose_out);

/**
 * Run summary as `key=value` lines. Free with `sn_string_free`.
 *
 * # Safety
 * `h` must come from `sn_pipeline_open`; `out` must be writable.
 */
enum SnStatus sn_pipeline_report(struct SnPipeline *h, char **out);

/**
 * Writes all artifacts into `out_dir`.
 *
 * # Safety
 * `h` must come from `sn_pipeline_open`; `out_dir` NUL-terminated.
 */
enum SnStatus sn_pipeline_write_outputs(struct SnPipeline *h, const char *out_dir);

/**
 * # Safety
 * `h` must come from `sn_pipeline_open` and not be used afterwards.
 */
void sn_pipeline_free(struct SnPipeline *h);

/**
 * # Safety
 * `s` must come from this library, or be NULL.
 */
void sn_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCENENAV_H */
